//! Single-scenario benchmark routes for training and evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::place::randomize_params;
use super::{place_scenarios, route_for_kind, RouteShapeConfig, RouteSpec, ScenarioInstance, ScenarioKind, MAX_BENCHMARK_ROUTE};
use crate::error::{Error, Result};

/// File name of a benchmark inside its directory.
pub const BENCHMARK_FILE: &str = "benchmark.json";

const PLACEMENT_ATTEMPTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kinds: Vec<ScenarioKind>,
    pub train_per_kind: usize,
    /// Training routes without any scenario.
    pub plain: usize,
    pub eval_per_kind: usize,
    pub seed: u64,
    pub shape: RouteShapeConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            kinds: ScenarioKind::ALL.to_vec(),
            train_per_kind: 40,
            plain: 40,
            eval_per_kind: 10,
            seed: 0,
            shape: RouteShapeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BenchmarkRoute {
    pub route: RouteSpec,
    /// The single scenario kind on this route; `None` for plain routes.
    pub kind: Option<ScenarioKind>,
    pub scenarios: Vec<ScenarioInstance>,
}

impl BenchmarkRoute {
    /// Number of scenarios on the route.
    pub fn density(&self) -> f64 {
        self.scenarios.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub train: Vec<BenchmarkRoute>,
    pub eval: Vec<BenchmarkRoute>,
}

fn make_route(id: String, kind: Option<ScenarioKind>, cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> Result<BenchmarkRoute> {
    let mut last_err = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let route = route_for_kind(&id, kind, &cfg.shape, rng);
        let Some(k) = kind else {
            return Ok(BenchmarkRoute { route, kind: None, scenarios: Vec::new() });
        };
        match place_scenarios(&route, &[k], rng) {
            Ok(mut scenarios) => {
                for s in &mut scenarios {
                    s.params = randomize_params(k, rng);
                }
                return Ok(BenchmarkRoute { route, kind, scenarios });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

/// Builds `train-per-kind` routes per kind plus `plain` scenario-free
/// training routes, and `eval-per-kind` evaluation routes per kind.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.shape.max_length > MAX_BENCHMARK_ROUTE || cfg.shape.min_length > cfg.shape.max_length {
        return Err(Error::Validation(format!(
            "route length range [{}, {}] must lie within (0, {MAX_BENCHMARK_ROUTE}]",
            cfg.shape.min_length, cfg.shape.max_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    for &k in &cfg.kinds {
        for i in 0..cfg.train_per_kind {
            train.push(make_route(format!("train-{k}-{i:03}"), Some(k), cfg, &mut rng)?);
        }
    }
    for i in 0..cfg.plain {
        train.push(make_route(format!("train-plain-{i:03}"), None, cfg, &mut rng)?);
    }
    let mut eval = Vec::new();
    for &k in &cfg.kinds {
        for i in 0..cfg.eval_per_kind {
            eval.push(make_route(format!("eval-{k}-{i:03}"), Some(k), cfg, &mut rng)?);
        }
    }
    Ok(Benchmark {
        config: cfg.clone(),
        train,
        eval,
    })
}

impl Benchmark {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("benchmark serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(text).map_err(|e| Error::parse(location, e))?;
        b.validate()?;
        Ok(b)
    }

    /// Writes `DIR/benchmark.json`, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(BENCHMARK_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    /// Reads `DIR/benchmark.json`, or the file itself when `path` is a file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(BENCHMARK_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_json(&text, &file.display().to_string())
    }

    /// Route and scenario invariants, and disjoint train/eval ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for r in self.train.iter().chain(&self.eval) {
            r.route.validate()?;
            let len = r.route.length()?;
            for s in &r.scenarios {
                s.validate(len)?;
                if Some(s.kind) != r.kind {
                    return Err(Error::Validation(format!(
                        "route {} is labelled {:?} but carries {}",
                        r.route.id, r.kind, s.kind
                    )));
                }
            }
            if !ids.insert(r.route.id.clone()) {
                return Err(Error::Validation(format!("duplicate route id {}", r.route.id)));
            }
        }
        Ok(())
    }
}
