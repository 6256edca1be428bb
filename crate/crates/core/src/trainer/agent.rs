//! World model, actor and critic bundled with their optimizers, and the
//! checkpoint layout that stores them.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{self, ActionId};
use crate::bev::{BevObservation, MEASUREMENT_LEN, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use crate::planner::{ActMode, Planner, PlannerConfig, PlannerStats};
use crate::replay::SequenceBatch;
use crate::world_model::{LatentBatch, LatentDraw, LossReport, WorldModel, WorldModelConfig};

use super::env::{DriveEnv, EpisodePolicy};

/// Checkpoint tensor holding the discrete action table.
pub const ACTION_TABLE: &str = "actions/table";

pub struct Agent {
    pub wm: WorldModel,
    pub wm_params: ParamStore,
    wm_opt: Adam,
    pub planner: Planner,
}

/// Outcome of one world-model update.
pub struct WorldModelStep {
    pub report: LossReport,
    pub grad_norm: f64,
    /// Posterior states of every valid batch row.
    pub starts: LatentBatch,
    /// `1 - done` per start state.
    pub start_weights: Vec<f64>,
}

/// Stacks observations into NHWC masks and measurement rows.
pub fn obs_batch(obs: &[&BevObservation]) -> (Tensor<f32>, Tensor<f32>) {
    let size = obs.first().map_or(0, |o| o.size);
    let n = size * size;
    let mut data = vec![0f32; obs.len() * n * NUM_CHANNELS];
    let mut meas = Vec::with_capacity(obs.len() * MEASUREMENT_LEN);
    for (k, o) in obs.iter().enumerate() {
        let frame = &mut data[k * n * NUM_CHANNELS..(k + 1) * n * NUM_CHANNELS];
        for c in 0..NUM_CHANNELS {
            for (p, &m) in o.plane(c).iter().enumerate() {
                frame[p * NUM_CHANNELS + c] = m as f32;
            }
        }
        meas.extend_from_slice(&o.measurements);
    }
    (
        Tensor::new(&[obs.len(), size, size, NUM_CHANNELS], data),
        Tensor::new(&[obs.len(), MEASUREMENT_LEN], meas),
    )
}

impl Agent {
    pub fn new(wm_cfg: WorldModelConfig, wm_opt: AdamConfig, planner_cfg: PlannerConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut wm_params = ParamStore::new();
        let wm = WorldModel::new(wm_cfg, &mut wm_params, rng)?;
        let planner = Planner::new(planner_cfg, wm.cfg.feat(), rng)?;
        Ok(Self {
            wm_opt: Adam::new(wm_opt, &wm_params),
            wm,
            wm_params,
            planner,
        })
    }

    /// Filters one frame per row into the latent state and picks actions.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_act(
        &self,
        state: &LatentBatch,
        obs: &[&BevObservation],
        prev: &[Option<ActionId>],
        first: &[bool],
        draw: LatentDraw,
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> (LatentBatch, Vec<ActionId>) {
        let (o, m) = obs_batch(obs);
        let next = self.wm.observe(&self.wm_params, state, &o, &m, prev, first, draw, rng);
        let acts = self.planner.act(&next.feat(), mode, rng);
        (next, acts)
    }

    /// One gradient step of the world model on `batch`.
    pub fn update_world_model(&mut self, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<WorldModelStep> {
        batch.check_finite()?;
        let tape = Tape::new();
        let vars = self.wm.loss(&tape, &self.wm_params, batch, rng)?;
        let report = LossReport::from_vars(&tape, &vars);
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("world-model loss {}", report.total)));
        }
        let grads = tape.backward(vars.total)?.for_store(&tape, &self.wm_params);
        let grad_norm = self.wm_opt.step(&mut self.wm_params, &grads);
        let feats = tape.value(vars.feats);
        let rows: Vec<usize> = (0..batch.rows()).filter(|&r| batch.mask[r]).collect();
        let all = LatentBatch::from_feat(&feats, self.wm.cfg.deter);
        Ok(WorldModelStep {
            report,
            grad_norm,
            starts: all.select(&rows),
            start_weights: rows.iter().map(|&r| if batch.done[r] { 0.0 } else { 1.0 }).collect(),
        })
    }

    /// One actor and critic step from an imagined rollout of the current
    /// policy, starting at `starts`.
    pub fn update_planner(&mut self, starts: &LatentBatch, weights: &[f64], rng: &mut impl Rng) -> Result<PlannerStats> {
        let planner = &self.planner;
        let mut policy = |f: &Tensor<f32>, r: &mut _| planner.act(f, ActMode::Sample, r);
        let im = self
            .wm
            .imagine(&self.wm_params, starts, planner.cfg.horizon, &mut policy, rng)?;
        let stats = self.planner.train_step(&im, weights)?;
        if !(stats.actor_loss.is_finite() && stats.critic_loss.is_finite()) {
            return Err(Error::NonFinite(format!(
                "planner losses actor {} critic {}",
                stats.actor_loss, stats.critic_loss
            )));
        }
        Ok(stats)
    }

    pub fn checksums(&self) -> (u64, u64, u64) {
        (
            self.wm_params.checksum(),
            self.planner.actor_params.checksum(),
            self.planner.critic_params.checksum(),
        )
    }

    /// Parameters of all three networks plus the action table, with
    /// `metadata` as the header.
    pub fn to_checkpoint(&self, metadata: String) -> Checkpoint {
        let mut c = Checkpoint::new(metadata);
        c.push_store("wm", &self.wm_params);
        c.push_store("actor", &self.planner.actor_params);
        c.push_store("critic", &self.planner.critic_params);
        c.push(ACTION_TABLE, actions::table_tensor());
        c
    }

    /// Rebuilds an agent with the given configs and loads its parameters.
    /// Optimizer moments start from zero.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        wm_cfg: WorldModelConfig,
        wm_opt: AdamConfig,
        planner_cfg: PlannerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let table = ckpt
            .get(ACTION_TABLE)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {ACTION_TABLE}")))?;
        if !actions::matches_table(table) {
            return Err(Error::Checkpoint("action table differs from this build".into()));
        }
        let mut a = Self::new(wm_cfg, wm_opt, planner_cfg, rng)?;
        ckpt.load_store("wm", &mut a.wm_params)?;
        ckpt.load_store("actor", &mut a.planner.actor_params)?;
        ckpt.load_store("critic", &mut a.planner.critic_params)?;
        Ok(a)
    }
}

/// Greedy actor on posterior-mode latents, deterministic given the
/// observations. Holds the agent by reference or by value.
pub struct AgentPolicy<A: Borrow<Agent>> {
    agent: A,
    state: LatentBatch,
    rng: rand::rngs::mock::StepRng,
}

impl<A: Borrow<Agent>> AgentPolicy<A> {
    pub fn new(agent: A) -> Self {
        Self {
            state: LatentBatch::zeros(&agent.borrow().wm.cfg, 1),
            agent,
            rng: rand::rngs::mock::StepRng::new(0, 0),
        }
    }
}

impl<A: Borrow<Agent>> EpisodePolicy for AgentPolicy<A> {
    fn begin(&mut self) {
        self.state = LatentBatch::zeros(&self.agent.borrow().wm.cfg, 1);
    }

    fn act(&mut self, _: &DriveEnv, obs: &BevObservation, prev: Option<ActionId>) -> Result<ActionId> {
        let (next, acts) = self.agent.borrow().observe_act(
            &self.state,
            &[obs],
            &[prev],
            &[prev.is_none()],
            LatentDraw::Mode,
            ActMode::Greedy,
            &mut self.rng,
        );
        self.state = next;
        Ok(acts[0])
    }
}

/// Header stored in every agent checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CheckpointMeta {
    pub config: super::TrainConfig,
    pub state: super::TrainState,
}

impl Agent {
    /// Filters the first `context` real frames of `route` under the greedy
    /// policy, then rolls the prior forward `frames` steps with greedy
    /// actions and decodes each imagined state into channel-major masks.
    pub fn dream(
        &self,
        route: &crate::scenario::BenchmarkRoute,
        seed: u64,
        settings: &super::EnvSettings,
        context: usize,
        frames: usize,
    ) -> Result<Vec<Vec<u8>>> {
        if frames == 0 {
            return Err(Error::Validation("at least one imagined frame is required".into()));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let (mut env, mut obs) = DriveEnv::new(route, seed, settings)?;
        let mut state = LatentBatch::zeros(&self.wm.cfg, 1);
        let mut prev = None;
        let mut action = crate::actions::BRAKE;
        for k in 0..context.max(1) {
            let (next, acts) =
                self.observe_act(&state, &[&obs], &[prev], &[k == 0], LatentDraw::Mode, ActMode::Greedy, &mut rng);
            state = next;
            action = acts[0];
            if k + 1 == context.max(1) || env.is_done() {
                break;
            }
            obs = env.step(action)?.obs;
            prev = Some(action);
        }
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            state = self.wm.prior_step(&self.wm_params, &state, &[action], LatentDraw::Mode, &mut rng);
            let feat = state.feat();
            out.extend(self.wm.decode_masks(&self.wm_params, &feat));
            action = self.planner.act(&feat, ActMode::Greedy, &mut rng)[0];
        }
        Ok(out)
    }
}
