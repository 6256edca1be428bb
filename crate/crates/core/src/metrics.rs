//! Route completion, driving score, weighted driving score, success rate and
//! infraction rates over per-episode logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioKind;
use crate::sim::{DoneReason, InfractionEvent, InfractionKind};

/// Multiplicative penalty factor per infraction kind.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTable(BTreeMap<InfractionKind, f64>);

impl Default for PenaltyTable {
    fn default() -> Self {
        Self(InfractionKind::ALL.iter().map(|&k| (k, k.default_penalty())).collect())
    }
}

impl PenaltyTable {
    pub fn get(&self, kind: InfractionKind) -> f64 {
        self.0[&kind]
    }

    pub fn set(&mut self, kind: InfractionKind, penalty: f64) -> Result<()> {
        if !(penalty > 0.0 && penalty < 1.0) {
            return Err(Error::Validation(format!("penalty for {kind} must lie in (0, 1), got {penalty}")));
        }
        self.0.insert(kind, penalty);
        Ok(())
    }

    /// Parses `kind = factor` lines of a TOML table; unlisted kinds keep
    /// their defaults.
    pub fn from_toml(text: &str, location: &str) -> Result<Self> {
        let raw: BTreeMap<String, f64> = toml::from_str(text).map_err(|e| Error::parse(location, e))?;
        let mut t = Self::default();
        for (k, v) in raw {
            t.set(k.parse()?, v)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn iter(&self) -> impl Iterator<Item = (InfractionKind, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

/// Outcome of one evaluated route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EpisodeLog {
    pub route_id: String,
    #[serde(default)]
    pub scenario_kind: Option<ScenarioKind>,
    pub completion: f64,
    #[serde(default)]
    pub infractions: Vec<InfractionEvent>,
    /// Meters.
    pub route_length: f64,
    /// Scenarios on the route.
    pub scenario_density: f64,
    #[serde(default)]
    pub done_reason: Option<DoneReason>,
    #[serde(default)]
    pub steps: u64,
    #[serde(default)]
    pub total_reward: f64,
}

impl EpisodeLog {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.completion) {
            return Err(Error::Validation(format!(
                "route {}: completion {} outside [0, 1]",
                self.route_id, self.completion
            )));
        }
        if !(self.scenario_density >= 0.0 && self.scenario_density.is_finite()) {
            return Err(Error::Validation(format!("route {}: negative scenario density", self.route_id)));
        }
        if !(self.route_length >= 0.0 && self.route_length.is_finite()) {
            return Err(Error::Validation(format!("route {}: negative route length", self.route_id)));
        }
        Ok(())
    }

    pub fn counts(&self) -> BTreeMap<InfractionKind, usize> {
        let mut c = BTreeMap::new();
        for e in &self.infractions {
            *c.entry(e.kind).or_insert(0) += 1;
        }
        c
    }

    /// Full completion without any infraction.
    pub fn is_success(&self) -> bool {
        self.completion >= 1.0 && self.infractions.is_empty()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("episode log serializes")
    }
}

/// Parses line-delimited logs; blank lines are skipped and errors carry the
/// 1-based line number.
pub fn parse_logs(text: &str, location: &str) -> Result<Vec<EpisodeLog>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{location}:{}", i + 1);
        let log: EpisodeLog = serde_json::from_str(line).map_err(|e| Error::parse(&at, e))?;
        log.validate().map_err(|e| Error::parse(&at, e))?;
        out.push(log);
    }
    Ok(out)
}

pub fn write_logs(logs: &[EpisodeLog]) -> String {
    logs.iter().map(|l| l.to_json_line() + "\n").collect()
}

/// `RC × Π penalty(kind)` over every infraction.
pub fn driving_score(log: &EpisodeLog, table: &PenaltyTable) -> f64 {
    log.infractions.iter().fold(log.completion, |s, e| s * table.get(e.kind))
}

/// `RC × Π_i penalty_i^(n_i)` with `n_i = count_i / density`, or
/// `n_i = count_i` when the density is zero.
pub fn weighted_score(completion: f64, counts: &[(f64, f64)], density: f64) -> Result<f64> {
    if density < 0.0 {
        return Err(Error::Validation(format!("negative scenario density {density}")));
    }
    let mut s = completion;
    for &(penalty, count) in counts {
        if count < 0.0 {
            return Err(Error::Validation(format!("negative infraction count {count}")));
        }
        let n = if density == 0.0 { count } else { count / density };
        s *= penalty.powf(n);
    }
    Ok(s)
}

pub fn weighted_driving_score(log: &EpisodeLog, table: &PenaltyTable) -> Result<f64> {
    let counts: Vec<(f64, f64)> = log
        .counts()
        .into_iter()
        .map(|(k, c)| (table.get(k), c as f64))
        .collect();
    weighted_score(log.completion, &counts, log.scenario_density)
}

/// Label used for logs without a scenario kind.
pub const PLAIN: &str = "plain";

fn kind_label(k: Option<ScenarioKind>) -> String {
    k.map_or_else(|| PLAIN.to_string(), |k| k.name().to_string())
}

/// Fraction of successful episodes per scenario kind.
pub fn success_rate(logs: &[EpisodeLog]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for l in logs {
        let e = acc.entry(kind_label(l.scenario_kind)).or_default();
        e.0 += l.is_success() as usize;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
}

/// Fraction of successful episodes over all logs; zero for no logs.
pub fn overall_success_rate(logs: &[EpisodeLog]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    logs.iter().filter(|l| l.is_success()).count() as f64 / logs.len() as f64
}

/// Infractions per kilometer driven, where the distance driven on a route
/// is its completion times its length.
pub fn infractions_per_km(logs: &[EpisodeLog]) -> Result<BTreeMap<InfractionKind, f64>> {
    let km: f64 = logs.iter().map(|l| l.completion * l.route_length / 1000.0).sum();
    if km <= 0.0 {
        return Err(Error::Unavailable("no distance driven".into()));
    }
    let mut out: BTreeMap<InfractionKind, f64> = InfractionKind::ALL.iter().map(|&k| (k, 0.0)).collect();
    for l in logs {
        for e in &l.infractions {
            *out.get_mut(&e.kind).expect("all kinds present") += 1.0;
        }
    }
    for v in out.values_mut() {
        *v /= km;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub route_id: String,
    pub kind: String,
    pub rc: f64,
    pub ds: f64,
    pub wds: f64,
    pub counts: Vec<usize>,
}

/// One row per log followed by a `mean` row with averaged scores and summed
/// counts.
pub fn summarize(logs: &[EpisodeLog], table: &PenaltyTable) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(logs.len() + 1);
    for l in logs {
        let counts = l.counts();
        rows.push(SummaryRow {
            route_id: l.route_id.clone(),
            kind: kind_label(l.scenario_kind),
            rc: l.completion,
            ds: driving_score(l, table),
            wds: weighted_driving_score(l, table)?,
            counts: InfractionKind::ALL.iter().map(|k| counts.get(k).copied().unwrap_or(0)).collect(),
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = SummaryRow {
        route_id: "mean".into(),
        kind: "all".into(),
        rc: rows.iter().map(|r| r.rc).sum::<f64>() / n,
        ds: rows.iter().map(|r| r.ds).sum::<f64>() / n,
        wds: rows.iter().map(|r| r.wds).sum::<f64>() / n,
        counts: (0..InfractionKind::ALL.len()).map(|i| rows.iter().map(|r| r.counts[i]).sum()).collect(),
    };
    rows.push(mean);
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("route-id,kind,rc,ds,wds");
    for k in InfractionKind::ALL {
        s.push(',');
        s.push_str(k.name());
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{:.6},{:.6},{:.6}", r.route_id, r.kind, r.rc, r.ds, r.wds);
        for c in &r.counts {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

/// Checks that `logs` cover `routes` one-to-one, in order, with matching
/// route ids and scenario kinds.
pub fn check_logs_match(logs: &[EpisodeLog], routes: &[crate::scenario::BenchmarkRoute]) -> Result<()> {
    if logs.len() != routes.len() {
        return Err(Error::Validation(format!(
            "{} logs for {} benchmark routes",
            logs.len(),
            routes.len()
        )));
    }
    for (i, (l, r)) in logs.iter().zip(routes).enumerate() {
        if l.route_id != r.route.id || l.scenario_kind != r.kind {
            return Err(Error::Validation(format!(
                "log {} ({}, {}) does not match route {} ({})",
                i + 1,
                l.route_id,
                kind_label(l.scenario_kind),
                r.route.id,
                kind_label(r.kind)
            )));
        }
    }
    Ok(())
}
