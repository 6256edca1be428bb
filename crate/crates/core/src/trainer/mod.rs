//! Training loop: parallel collection with background resets, a warm-up
//! route curriculum, a growing planner train ratio, one planner reset
//! partway through, checkpoints and CSV logs.

mod agent;
mod env;
mod pool;

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use agent::{obs_batch, Agent, AgentPolicy, CheckpointMeta, WorldModelStep, ACTION_TABLE};
pub use env::{
    eval_seed, evaluate, run_episode, Autopilot, DoNothing, DriveEnv, EnvSettings, EnvStep, EpisodePolicy, RandomPolicy,
};
pub use pool::{CollectStats, Controller, EnvPool, EpisodeSummary, PoolConfig};

use crate::actions::{ActionId, NUM_ACTIONS};
use crate::bev::{BevConfig, BevObservation};
use crate::error::{Error, Result};
use crate::metrics::{driving_score, overall_success_rate, PenaltyTable};
use crate::nn::{AdamConfig, Checkpoint};
use crate::planner::{ActMode, PlannerConfig};
use crate::replay::{SequenceBatch, SharedReplay};
use crate::reward::RewardConfig;
use crate::scenario::{build_benchmark, Benchmark, BenchmarkConfig, BenchmarkRoute, ScenarioKind};
use crate::sim::SimConfig;
use crate::world_model::{LatentBatch, LatentDraw, WorldModelConfig};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPISODE_LOG: &str = "episodes.csv";
pub const DIAGNOSTIC: &str = "diagnostic.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Environment steps over the whole run.
    pub total_steps: u64,
    pub num_envs: usize,
    pub warmup_fraction: f64,
    pub warmup_kinds: Vec<ScenarioKind>,
    pub reset_fraction: f64,
    /// Turns the mid-run planner reset off.
    pub planner_reset: bool,
    pub ratio_start: f64,
    pub ratio_end: f64,
    pub seed: u64,
    /// Steps per environment between two world-model updates.
    pub collect_steps: u64,
    /// Environment steps collected before the first update.
    pub prefill: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub replay_capacity: usize,
    /// Environment steps between checkpoints; 0 keeps only the first and
    /// last.
    pub checkpoint_interval: u64,
    /// Environment steps between evaluations; 0 disables them.
    pub eval_interval: u64,
    /// Evaluation routes used during training; 0 uses all of them.
    pub eval_routes: usize,
    pub log_interval: u64,
    pub benchmark: BenchmarkConfig,
    /// Loads `benchmark.json` from this directory instead of generating one.
    pub benchmark_dir: Option<PathBuf>,
    pub world_model: WorldModelConfig,
    pub wm_optimizer: AdamConfig,
    pub planner: PlannerConfig,
    pub bev: BevConfig,
    pub sim: SimConfig,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 300_000,
            num_envs: 4,
            warmup_fraction: 0.1,
            warmup_kinds: vec![ScenarioKind::LaneFollow, ScenarioKind::VanillaTurn],
            reset_fraction: 0.5,
            planner_reset: true,
            ratio_start: 1.0,
            ratio_end: 4.0,
            seed: 0,
            collect_steps: 16,
            prefill: 2_500,
            batch: 16,
            seq_len: 32,
            replay_capacity: crate::replay::ReplayBuffer::DEFAULT_CAPACITY,
            checkpoint_interval: 50_000,
            eval_interval: 50_000,
            eval_routes: 0,
            log_interval: 1_000,
            benchmark: BenchmarkConfig::default(),
            benchmark_dir: None,
            world_model: WorldModelConfig::default(),
            wm_optimizer: AdamConfig::default(),
            planner: PlannerConfig::default(),
            bev: BevConfig::default(),
            sim: SimConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks, a 32 x 32 raster, one environment and a short run on
    /// a three-kind benchmark.
    pub fn quick(total_steps: u64, seed: u64) -> Self {
        let bev = BevConfig {
            size: 32,
            meters_per_pixel: 1.6,
        };
        let mut benchmark = BenchmarkConfig {
            kinds: vec![ScenarioKind::LaneFollow, ScenarioKind::VanillaTurn, ScenarioKind::HardBrake],
            train_per_kind: 4,
            plain: 0,
            eval_per_kind: 2,
            seed,
            ..Default::default()
        };
        benchmark.shape.min_length = 100.0;
        benchmark.shape.max_length = 140.0;
        Self {
            total_steps,
            num_envs: 1,
            seed,
            collect_steps: 16,
            prefill: 200,
            batch: 4,
            seq_len: 16,
            replay_capacity: 50_000,
            checkpoint_interval: 0,
            eval_interval: 0,
            log_interval: 250,
            benchmark,
            world_model: WorldModelConfig::tiny(bev.size),
            planner: PlannerConfig {
                horizon: 5,
                ..PlannerConfig::tiny()
            },
            bev,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, r) = (self.warmup_fraction, self.reset_fraction);
        if !(0.0 <= w && w < r && r < 1.0) {
            return Err(Error::Validation(format!(
                "need 0 <= warmup-fraction < reset-fraction < 1, got {w} and {r}"
            )));
        }
        if self.num_envs == 0 {
            return Err(Error::Validation("num-envs must be at least 1".into()));
        }
        if w > 0.0 && self.warmup_kinds.is_empty() {
            return Err(Error::Validation("warm-up needs at least one warmup kind".into()));
        }
        for (name, v) in [("ratio-start", self.ratio_start), ("ratio-end", self.ratio_end)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.collect_steps == 0 || self.batch == 0 || self.seq_len == 0 || self.log_interval == 0 {
            return Err(Error::Validation(
                "collect-steps, batch, seq-len and log-interval must be positive".into(),
            ));
        }
        if self.replay_capacity < self.seq_len {
            return Err(Error::Validation("replay capacity is smaller than one sequence".into()));
        }
        if self.world_model.size != self.bev.size {
            return Err(Error::Validation(format!(
                "world-model size {} differs from bev size {}",
                self.world_model.size, self.bev.size
            )));
        }
        self.world_model.validate()?;
        self.planner.validate()?;
        self.bev.validate()?;
        self.sim.validate()?;
        self.reward.validate()
    }

    pub fn from_toml(text: &str, location: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(location, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn settings(&self) -> EnvSettings {
        EnvSettings {
            sim: self.sim.clone(),
            reward: self.reward.clone(),
            bev: self.bev,
        }
    }

    /// Last environment step of the warm-up phase.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64) as u64
    }

    /// Environment step at which the planner is reset.
    pub fn reset_step(&self) -> u64 {
        (self.reset_fraction * self.total_steps as f64) as u64
    }

    /// The benchmark named by `benchmark-dir`, or one generated from
    /// `benchmark`.
    pub fn load_benchmark(&self) -> Result<Benchmark> {
        match &self.benchmark_dir {
            Some(dir) => Benchmark::load(dir),
            None => build_benchmark(&self.benchmark),
        }
    }
}

/// Planner updates per world-model update, linear from `ratio-start` at
/// step 0 to `ratio-end` at `total-steps`.
pub fn schedule_train_ratio(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.total_steps == 0 {
        return cfg.ratio_start;
    }
    let t = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
    cfg.ratio_start + (cfg.ratio_end - cfg.ratio_start) * t
}

/// Counters that survive checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainState {
    pub env_steps: u64,
    pub episodes: u64,
    pub wm_updates: u64,
    pub planner_updates: u64,
    /// Fractional planner updates owed to the ratio schedule.
    pub ratio_credit: f64,
    pub planner_resets: u32,
}

/// One row of the training log. Empty fields mean nothing was measured in
/// the interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLogRow {
    pub env_steps: u64,
    pub episodes: u64,
    pub wm_updates: u64,
    pub planner_updates: u64,
    pub ratio: f64,
    pub warmup: bool,
    pub l_pred: Option<f64>,
    pub l_dyn: Option<f64>,
    pub l_rep: Option<f64>,
    pub wm_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub return_scale: f64,
    pub episode_return: Option<f64>,
    pub eval_success: Option<f64>,
    pub eval_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "env-steps,episodes,wm-updates,planner-updates,ratio,phase,l-pred,l-dyn,l-rep,\
wm-loss,actor-loss,critic-loss,entropy,return-scale,episode-return,eval-success,eval-score";

    pub fn row_csv(r: &TrainLogRow) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!(
            "{},{},{},{},{},{}",
            r.env_steps,
            r.episodes,
            r.wm_updates,
            r.planner_updates,
            r.ratio,
            if r.warmup { "warmup" } else { "main" }
        );
        for v in [r.l_pred, r.l_dyn, r.l_rep, r.wm_loss, r.actor_loss, r.critic_loss, r.entropy] {
            let _ = write!(s, ",{}", opt(v));
        }
        let _ = write!(
            s,
            ",{},{},{},{}",
            r.return_scale,
            opt(r.episode_return),
            opt(r.eval_success),
            opt(r.eval_score)
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&Self::row_csv(r));
            s.push('\n');
        }
        s
    }
}

/// Parameter checksums on both sides of the planner reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResetRecord {
    pub env_steps: u64,
    pub wm_before: u64,
    pub wm_after: u64,
    pub actor_before: u64,
    pub actor_after: u64,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    /// Environment steps of the run when the episode ended.
    pub env_steps: u64,
    pub summary: EpisodeSummary,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
    pub episodes: Vec<EpisodeRecord>,
    pub reset: Option<ResetRecord>,
    /// Ratio and planner-update count per world-model update.
    pub ratio_trace: Vec<(f64, u64)>,
}

/// Samples actions from the actor on posterior samples, one latent row per
/// environment slot.
pub struct AgentController<'a, R: Rng> {
    pub agent: &'a Agent,
    pub latent: &'a mut LatentBatch,
    pub rng: &'a mut R,
}

impl<R: Rng> Controller for AgentController<'_, R> {
    fn act(&mut self, slots: &[usize], obs: &[&BevObservation], prev: &[Option<ActionId>], first: &[bool]) -> Result<Vec<ActionId>> {
        let sub = self.latent.select(slots);
        let (next, acts) =
            self.agent
                .observe_act(&sub, obs, prev, first, LatentDraw::Sample, ActMode::Sample, self.rng);
        for (k, &s) in slots.iter().enumerate() {
            self.latent.set_row(s, &next, k);
        }
        Ok(acts)
    }
}

/// Same action everywhere.
pub struct FixedController(pub ActionId);

impl Controller for FixedController {
    fn act(&mut self, slots: &[usize], _: &[&BevObservation], _: &[Option<ActionId>], _: &[bool]) -> Result<Vec<ActionId>> {
        Ok(vec![self.0; slots.len()])
    }
}

/// Uniformly random actions.
pub struct RandomController(pub ChaCha8Rng);

impl Controller for RandomController {
    fn act(&mut self, slots: &[usize], _: &[&BevObservation], _: &[Option<ActionId>], _: &[bool]) -> Result<Vec<ActionId>> {
        Ok(slots.iter().map(|_| self.0.gen_range(0..NUM_ACTIONS)).collect())
    }
}

/// Checkpoint file name for a step count.
pub fn checkpoint_name(env_steps: u64) -> String {
    format!("ckpt-{env_steps:09}.t2d")
}

fn save_checkpoint(agent: &Agent, cfg: &TrainConfig, state: &TrainState, out: &Path) -> Result<PathBuf> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        state: state.clone(),
    };
    let path = out.join(checkpoint_name(state.env_steps));
    let json = serde_json::to_string(&meta).expect("checkpoint metadata serializes");
    agent.to_checkpoint(json).save(&path)?;
    info!("checkpoint {}", path.display());
    Ok(path)
}

/// Loads an agent checkpoint together with its training header.
pub fn load_agent(path: &Path) -> Result<(Agent, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let cfg = &meta.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let agent = Agent::from_checkpoint(
        &ckpt,
        cfg.world_model.clone(),
        cfg.wm_optimizer.clone(),
        cfg.planner.clone(),
        &mut rng,
    )?;
    Ok((agent, meta))
}

/// Greedy evaluation of a checkpoint on `routes`, in order.
pub fn evaluate_checkpoint(path: &Path, routes: &[BenchmarkRoute], seed: u64) -> Result<Vec<crate::metrics::EpisodeLog>> {
    let (agent, meta) = load_agent(path)?;
    evaluate(routes, seed, &meta.config.settings(), &mut AgentPolicy::new(&agent))
}

fn write_diagnostic(out: &Path, err: &Error, state: &TrainState, batch: &SequenceBatch, agent: &Agent) -> Result<()> {
    let (wm, actor, critic) = agent.checksums();
    let sources: Vec<_> = batch
        .sources
        .iter()
        .map(|s| serde_json::json!({"episode": s.episode, "start": s.start, "valid": s.valid, "anchored": s.anchored}))
        .collect();
    let dump = serde_json::json!({
        "error": err.to_string(),
        "env-steps": state.env_steps,
        "wm-updates": state.wm_updates,
        "checksums": {"world-model": wm, "actor": actor, "critic": critic},
        "batch": {
            "batch": batch.batch,
            "len": batch.len,
            "sources": sources,
            "action": batch.action,
            "reward": batch.reward,
            "done": batch.done,
            "mask": batch.mask,
        },
    });
    let path = out.join(DIAGNOSTIC);
    std::fs::write(&path, serde_json::to_string_pretty(&dump).expect("diagnostic serializes"))
        .map_err(|e| Error::io(&path, e))
}

/// Running means of the quantities logged per interval.
#[derive(Default)]
struct Interval {
    wm: [f64; 4],
    wm_n: u64,
    planner: [f64; 3],
    planner_n: u64,
    returns: f64,
    returns_n: u64,
}

impl Interval {
    fn mean(sum: f64, n: u64) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

struct Writers {
    log: File,
    episodes: File,
}

impl Writers {
    fn open(out: &Path) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<File> {
            let path = out.join(name);
            let fresh = !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(f)
        };
        Ok(Self {
            log: open(TRAIN_LOG, TrainLog::HEADER)?,
            episodes: open(EPISODE_LOG, "env-steps,slot,route-id,kind,steps,return,done-reason,completion")?,
        })
    }
}

fn put(f: &mut File, name: &str, line: &str) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(Path::new(name), e))
}

/// Runs training, writing checkpoints, `train_log.csv` and `episodes.csv`
/// into `out`. With `resume`, parameters and counters continue from that
/// checkpoint with an empty replay buffer.
pub fn train(cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let bench = cfg.load_benchmark()?;
    let all_routes = bench.train.clone();
    let warm_routes: Vec<BenchmarkRoute> = all_routes
        .iter()
        .filter(|r| r.kind.is_some_and(|k| cfg.warmup_kinds.contains(&k)))
        .cloned()
        .collect();
    if cfg.warmup_steps() > 0 && warm_routes.is_empty() {
        return Err(Error::Validation("benchmark has no warm-up routes".into()));
    }
    let eval_routes: Vec<BenchmarkRoute> = match cfg.eval_routes {
        0 => bench.eval.clone(),
        n => bench.eval.iter().take(n).cloned().collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut agent, mut state) = match resume {
        Some(path) => {
            let (agent, meta) = load_agent(path)?;
            rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ meta.state.env_steps.rotate_left(32));
            (agent, meta.state)
        }
        None => (
            Agent::new(cfg.world_model.clone(), cfg.wm_optimizer.clone(), cfg.planner.clone(), &mut rng)?,
            TrainState::default(),
        ),
    };
    let mut writers = Writers::open(out)?;
    let mut outcome = TrainOutcome {
        state: state.clone(),
        log: TrainLog::default(),
        checkpoints: Vec::new(),
        episodes: Vec::new(),
        reset: None,
        ratio_trace: Vec::new(),
    };
    if resume.is_none() {
        outcome.checkpoints.push(save_checkpoint(&agent, cfg, &state, out)?);
    }
    if state.env_steps >= cfg.total_steps {
        outcome.state = state;
        return Ok(outcome);
    }

    let replay = SharedReplay::new(cfg.replay_capacity);
    let warm = |s: u64| s < cfg.warmup_steps();
    let pool_cfg = PoolConfig {
        num_envs: cfg.num_envs,
        seed: cfg.seed ^ state.env_steps,
        settings: cfg.settings(),
        ..Default::default()
    };
    let mut in_warmup = warm(state.env_steps);
    let first_routes = if in_warmup { warm_routes.clone() } else { all_routes.clone() };
    let mut pool = EnvPool::new(pool_cfg, first_routes, replay.clone())?;
    let mut latent = LatentBatch::zeros(&agent.wm.cfg, cfg.num_envs);
    let mut acc = Interval::default();
    let mut last_ckpt = state.env_steps;
    let mut last_eval = state.env_steps;
    let mut last_log = state.env_steps;
    let n = cfg.num_envs as u64;

    while state.env_steps < cfg.total_steps {
        if in_warmup && !warm(state.env_steps) {
            in_warmup = false;
            pool.set_routes(all_routes.clone())?;
            info!("warm-up finished at {} env steps", state.env_steps);
        }
        let per_env = cfg.collect_steps.min((cfg.total_steps - state.env_steps).div_ceil(n));
        let stats = {
            let mut ctl = AgentController {
                agent: &agent,
                latent: &mut latent,
                rng: &mut rng,
            };
            pool.collect(per_env, &mut ctl)?
        };
        state.env_steps += stats.transitions;
        for ep in stats.episodes {
            state.episodes += 1;
            acc.returns += ep.total_reward;
            acc.returns_n += 1;
            let line = format!(
                "{},{},{},{},{},{},{},{}",
                state.env_steps,
                ep.slot,
                ep.route_id,
                ep.kind.map_or("plain", |k| k.name()),
                ep.steps,
                ep.total_reward,
                ep.done_reason.map_or("truncated".to_string(), |r| {
                    serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                }),
                ep.completion
            );
            put(&mut writers.episodes, EPISODE_LOG, &line)?;
            outcome.episodes.push(EpisodeRecord {
                env_steps: state.env_steps,
                summary: ep,
            });
        }

        if cfg.planner_reset && state.planner_resets == 0 && state.env_steps >= cfg.reset_step() {
            let (wm_before, actor_before, _) = agent.checksums();
            agent.planner.reset(&mut rng);
            state.planner_resets += 1;
            let (wm_after, actor_after, _) = agent.checksums();
            outcome.reset = Some(ResetRecord {
                env_steps: state.env_steps,
                wm_before,
                wm_after,
                actor_before,
                actor_after,
            });
            info!("planner reset at {} env steps", state.env_steps);
        }

        if state.env_steps >= cfg.prefill && !replay.is_empty() {
            let batch = replay.sample(cfg.batch, cfg.seq_len, &mut rng)?;
            let step = match agent.update_world_model(&batch, &mut rng) {
                Ok(s) => s,
                Err(e) => {
                    if matches!(e, Error::NonFinite(_)) {
                        write_diagnostic(out, &e, &state, &batch, &agent)?;
                    }
                    return Err(e);
                }
            };
            state.wm_updates += 1;
            let r = &step.report;
            for (a, v) in acc.wm.iter_mut().zip([r.l_pred, r.l_dyn, r.l_rep, r.total]) {
                *a += v;
            }
            acc.wm_n += 1;
            let ratio = schedule_train_ratio(state.env_steps, cfg);
            state.ratio_credit += ratio;
            let k = state.ratio_credit.floor();
            state.ratio_credit -= k;
            for _ in 0..k as u64 {
                let ps = match agent.update_planner(&step.starts, &step.start_weights, &mut rng) {
                    Ok(s) => s,
                    Err(e) => {
                        if matches!(e, Error::NonFinite(_)) {
                            write_diagnostic(out, &e, &state, &batch, &agent)?;
                        }
                        return Err(e);
                    }
                };
                state.planner_updates += 1;
                for (a, v) in acc.planner.iter_mut().zip([ps.actor_loss, ps.critic_loss, ps.entropy]) {
                    *a += v;
                }
                acc.planner_n += 1;
            }
            outcome.ratio_trace.push((ratio, k as u64));
        }

        let finished = state.env_steps >= cfg.total_steps;
        let mut eval = None;
        if cfg.eval_interval > 0 && !eval_routes.is_empty() && state.env_steps / cfg.eval_interval > last_eval / cfg.eval_interval {
            last_eval = state.env_steps;
            let logs = evaluate(&eval_routes, cfg.seed, &cfg.settings(), &mut AgentPolicy::new(&agent))?;
            let table = PenaltyTable::default();
            let ds = logs.iter().map(|l| driving_score(l, &table)).sum::<f64>() / logs.len() as f64;
            eval = Some((overall_success_rate(&logs), ds));
            info!("eval at {}: success {:.3} score {:.3}", state.env_steps, eval.unwrap().0, ds);
        }
        if finished || eval.is_some() || state.env_steps / cfg.log_interval > last_log / cfg.log_interval {
            last_log = state.env_steps;
            let row = TrainLogRow {
                env_steps: state.env_steps,
                episodes: state.episodes,
                wm_updates: state.wm_updates,
                planner_updates: state.planner_updates,
                ratio: schedule_train_ratio(state.env_steps, cfg),
                warmup: in_warmup,
                l_pred: Interval::mean(acc.wm[0], acc.wm_n),
                l_dyn: Interval::mean(acc.wm[1], acc.wm_n),
                l_rep: Interval::mean(acc.wm[2], acc.wm_n),
                wm_loss: Interval::mean(acc.wm[3], acc.wm_n),
                actor_loss: Interval::mean(acc.planner[0], acc.planner_n),
                critic_loss: Interval::mean(acc.planner[1], acc.planner_n),
                entropy: Interval::mean(acc.planner[2], acc.planner_n),
                return_scale: agent.planner.scale.s,
                episode_return: Interval::mean(acc.returns, acc.returns_n),
                eval_success: eval.map(|e| e.0),
                eval_score: eval.map(|e| e.1),
            };
            put(&mut writers.log, TRAIN_LOG, &TrainLog::row_csv(&row))?;
            outcome.log.rows.push(row);
            acc = Interval::default();
        }
        let due = cfg.checkpoint_interval > 0 && state.env_steps / cfg.checkpoint_interval > last_ckpt / cfg.checkpoint_interval;
        if finished || due {
            last_ckpt = state.env_steps;
            outcome.checkpoints.push(save_checkpoint(&agent, cfg, &state, out)?);
        }
    }
    outcome.state = state;
    Ok(outcome)
}
