//! `t2d` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use t2d_core::bev::dump_frames;
use t2d_core::gradsuite::{run_suite, SuiteConfig};
use t2d_core::metrics::{
    check_logs_match, infractions_per_km, parse_logs, success_rate, summarize, summary_csv, write_logs, PenaltyTable,
};
use t2d_core::scenario::{build_benchmark, Benchmark, BenchmarkConfig, BenchmarkRoute};
use t2d_core::trainer::{
    evaluate, load_agent, train, AgentPolicy, Autopilot, DoNothing, EnvSettings, EpisodePolicy, RandomPolicy,
    TrainConfig,
};
use t2d_core::{Error, Result};

/// Real frames filtered before a dream starts.
const DREAM_CONTEXT: usize = 5;

#[derive(Parser)]
#[command(name = "t2d", version, about = "Driving world model trained in imagination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; falls back to T2D_SEED, then to the config value.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> Result<Option<u64>> {
        if let Some(s) = self.seed {
            return Ok(Some(s));
        }
        match std::env::var("T2D_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("T2D_SEED must be an unsigned integer, got {v:?}"))),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// Greedy actor of the checkpoint.
    Agent,
    DoNothing,
    Random,
    /// Rule-based driver with access to the simulator state.
    Autopilot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and evaluation routes.
    GenRoutes {
        /// Benchmark config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train a world model and planner.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Evaluate a policy on every route of a benchmark split, in order.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        benchmark: PathBuf,
        /// Episode log file (one JSON object per line).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "agent")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Summarize episode logs into scores and infraction counts.
    Metrics {
        #[arg(long)]
        logs: PathBuf,
        /// Penalty factors (TOML, `kind = factor`); defaults apply when
        /// omitted.
        #[arg(long)]
        penalties: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Benchmark the logs must cover, route by route.
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Roll the world model forward from real context frames and dump the
    /// decoded BEV channels as PGM images.
    Dream {
        #[arg(long)]
        ckpt: PathBuf,
        /// A route JSON file, or a benchmark file or directory.
        #[arg(long)]
        route: PathBuf,
        /// Route id inside a benchmark; defaults to its first eval route.
        #[arg(long)]
        route_id: Option<String>,
        #[arg(long)]
        frames: i64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        seed: SeedArg,
        /// Corrupts the analytic gradient of one check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Usage(format!("{} does not exist", path.display()))
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn split_routes(b: &Benchmark, split: Split) -> &[BenchmarkRoute] {
    match split {
        Split::Train => &b.train,
        Split::Eval => &b.eval,
    }
}

fn load_route(path: &Path, id: Option<&str>) -> Result<BenchmarkRoute> {
    if path.is_dir() {
        return pick_route(&Benchmark::load(path)?, id);
    }
    let text = read(path)?;
    let loc = path.display().to_string();
    if let Ok(route) = serde_json::from_str::<BenchmarkRoute>(&text) {
        route.route.validate()?;
        return Ok(route);
    }
    pick_route(&Benchmark::from_json(&text, &loc)?, id)
}

fn pick_route(b: &Benchmark, id: Option<&str>) -> Result<BenchmarkRoute> {
    let found = match id {
        Some(id) => b.eval.iter().chain(&b.train).find(|r| r.route.id == id),
        None => b.eval.first().or(b.train.first()),
    };
    found
        .cloned()
        .ok_or_else(|| Error::Usage(format!("route {} not found in benchmark", id.unwrap_or("(first)"))))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenRoutes { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => toml::from_str::<BenchmarkConfig>(&read(&p)?).map_err(|e| Error::Parse {
                    location: p.display().to_string(),
                    message: e.to_string(),
                })?,
                None => BenchmarkConfig::default(),
            };
            if let Some(s) = seed.resolve()? {
                cfg.seed = s;
            }
            let b = build_benchmark(&cfg)?;
            b.save(&out)?;
            println!("train routes {}", b.train.len());
            println!("eval routes {}", b.eval.len());
        }
        Command::Train {
            config,
            out,
            resume,
            seed,
        } => {
            let mut cfg = TrainConfig::from_toml(&read(&config)?, &config.display().to_string())?;
            if let Some(s) = seed.resolve()? {
                cfg.seed = s;
            }
            let outcome = train(&cfg, &out, resume.as_deref())?;
            let s = &outcome.state;
            println!("env steps {}", s.env_steps);
            println!("episodes {}", s.episodes);
            println!("world-model updates {}", s.wm_updates);
            println!("planner updates {}", s.planner_updates);
            for c in &outcome.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Eval {
            ckpt,
            benchmark,
            out,
            policy,
            split,
            seed,
        } => {
            let bench = Benchmark::load(&benchmark)?;
            let routes = split_routes(&bench, split);
            let seed = seed.resolve()?.unwrap_or(0);
            let loaded = match (&ckpt, policy) {
                (Some(p), _) => Some(load_agent(p)?),
                (None, PolicyArg::Agent) => return Err(Error::Usage("--ckpt is required for the agent policy".into())),
                (None, _) => None,
            };
            let settings = loaded.as_ref().map_or_else(EnvSettings::default, |(_, m)| m.config.settings());
            let mut scripted: Box<dyn EpisodePolicy> = match policy {
                PolicyArg::DoNothing => Box::new(DoNothing),
                PolicyArg::Random => Box::new(RandomPolicy::new(seed)),
                PolicyArg::Autopilot => Box::new(Autopilot),
                PolicyArg::Agent => Box::new(DoNothing),
            };
            let logs = match (policy, &loaded) {
                (PolicyArg::Agent, Some((agent, _))) => evaluate(routes, seed, &settings, &mut AgentPolicy::new(agent))?,
                _ => evaluate(routes, seed, &settings, scripted.as_mut())?,
            };
            check_logs_match(&logs, routes)?;
            write(&out, &write_logs(&logs))?;
            println!("episodes {}", logs.len());
        }
        Command::Metrics {
            logs,
            penalties,
            out,
            benchmark,
            split,
            seed: _,
        } => {
            let table = match penalties {
                Some(p) => PenaltyTable::from_toml(&read(&p)?, &p.display().to_string())?,
                None => PenaltyTable::default(),
            };
            let parsed = parse_logs(&read(&logs)?, &logs.display().to_string())?;
            if let Some(b) = benchmark {
                check_logs_match(&parsed, split_routes(&Benchmark::load(&b)?, split))?;
            }
            let rows = summarize(&parsed, &table)?;
            write(&out, &summary_csv(&rows))?;
            let mean = rows.last().expect("mean row");
            println!("mean rc {:.6} ds {:.6} wds {:.6}", mean.rc, mean.ds, mean.wds);
            for (kind, rate) in success_rate(&parsed) {
                println!("success {kind} {rate:.6}");
            }
            if let Ok(rates) = infractions_per_km(&parsed) {
                for (kind, rate) in rates {
                    println!("per-km {kind} {rate:.6}");
                }
            }
        }
        Command::Dream {
            ckpt,
            route,
            route_id,
            frames,
            out,
            seed,
        } => {
            if frames < 1 {
                return Err(Error::Usage(format!("--frames must be at least 1, got {frames}")));
            }
            let route = load_route(&route, route_id.as_deref())?;
            let (agent, meta) = load_agent(&ckpt)?;
            let seed = seed.resolve()?.unwrap_or(meta.config.seed);
            let masks = agent.dream(&route, seed, &meta.config.settings(), DREAM_CONTEXT, frames as usize)?;
            let size = meta.config.bev.size;
            let list: Vec<(usize, &[u8], usize)> = masks.iter().enumerate().map(|(i, m)| (i, m.as_slice(), size)).collect();
            dump_frames(&out, &list)?;
            println!("frames {}", masks.len());
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = run_suite(&SuiteConfig {
                seed: seed.resolve()?.unwrap_or(0),
                corrupt,
            })?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Error::Validation(format!("gradient checks failed: {}", report.failures().join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
