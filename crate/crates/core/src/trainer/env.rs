//! One simulated route wrapped as an episodic environment with BEV
//! observations, plus sequential evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::{ActionId, BRAKE, NUM_ACTIONS};
use crate::bev::{rasterize, BevConfig, BevObservation, HistoryRing, Snapshot};
use crate::error::Result;
use crate::metrics::EpisodeLog;
use crate::reward::{total_reward, RewardConfig};
use crate::scenario::BenchmarkRoute;
use crate::sim::{autopilot_action, InfractionEvent, SimConfig, StepResult, World};

/// Simulator settings shared by every environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvSettings {
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub bev: BevConfig,
}

pub struct DriveEnv {
    world: World,
    history: HistoryRing,
    settings: EnvSettings,
    route_id: String,
    kind: Option<crate::scenario::ScenarioKind>,
    density: f64,
    route_length: f64,
    infractions: Vec<InfractionEvent>,
    steps: u64,
    total_reward: f64,
    last: Option<StepResult>,
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct EnvStep {
    pub obs: BevObservation,
    pub reward: f64,
    pub result: StepResult,
}

impl DriveEnv {
    /// Builds the world for `route` and returns the first observation.
    pub fn new(route: &BenchmarkRoute, seed: u64, settings: &EnvSettings) -> Result<(Self, BevObservation)> {
        settings.bev.validate()?;
        let world = World::new(&route.route, &route.scenarios, seed, &settings.sim, &settings.reward)?;
        let mut history = HistoryRing::new();
        history.push(Snapshot::capture(&world));
        let env = Self {
            route_length: route.route.length()?,
            world,
            history,
            settings: settings.clone(),
            route_id: route.route.id.clone(),
            kind: route.kind,
            density: route.density(),
            infractions: Vec::new(),
            steps: 0,
            total_reward: 0.0,
            last: None,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn observe(&self) -> BevObservation {
        rasterize(&self.world, &self.history, &self.settings.bev)
    }

    pub fn step(&mut self, action: ActionId) -> Result<EnvStep> {
        let result = self.world.step(action)?;
        self.history.push(Snapshot::capture(&self.world));
        let reward = total_reward(&result.reward_terms, &self.settings.reward);
        self.infractions.extend(result.infractions.iter().copied());
        self.steps += 1;
        self.total_reward += reward;
        self.last = Some(result.clone());
        Ok(EnvStep {
            obs: self.observe(),
            reward,
            result,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.world.done().is_some()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn route_id(&self) -> &str {
        &self.route_id
    }

    /// Outcome so far, with every infraction recorded during the episode.
    pub fn log(&self) -> EpisodeLog {
        EpisodeLog {
            route_id: self.route_id.clone(),
            scenario_kind: self.kind,
            completion: self.world.completion().clamp(0.0, 1.0),
            infractions: self.infractions.clone(),
            route_length: self.route_length,
            scenario_density: self.density,
            done_reason: self.world.done(),
            steps: self.steps,
            total_reward: self.total_reward,
        }
    }
}

/// Per-episode driving policy for sequential evaluation.
pub trait EpisodePolicy {
    /// Called before the first step of every episode.
    fn begin(&mut self) {}

    /// Chooses the next action given the latest observation and the action
    /// that produced it (`None` on the first frame).
    fn act(&mut self, env: &DriveEnv, obs: &BevObservation, prev: Option<ActionId>) -> Result<ActionId>;
}

/// Always brakes.
pub struct DoNothing;

impl EpisodePolicy for DoNothing {
    fn act(&mut self, _: &DriveEnv, _: &BevObservation, _: Option<ActionId>) -> Result<ActionId> {
        Ok(BRAKE)
    }
}

/// Uniformly random actions from a seeded stream.
pub struct RandomPolicy(pub ChaCha8Rng);

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl EpisodePolicy for RandomPolicy {
    fn act(&mut self, _: &DriveEnv, _: &BevObservation, _: Option<ActionId>) -> Result<ActionId> {
        Ok(self.0.gen_range(0..NUM_ACTIONS))
    }
}

/// The rule-based driver, which reads the simulator state directly.
pub struct Autopilot;

impl EpisodePolicy for Autopilot {
    fn act(&mut self, env: &DriveEnv, _: &BevObservation, _: Option<ActionId>) -> Result<ActionId> {
        Ok(autopilot_action(env.world()))
    }
}

/// Runs `policy` on `route` until the episode ends.
pub fn run_episode(
    route: &BenchmarkRoute,
    seed: u64,
    settings: &EnvSettings,
    policy: &mut dyn EpisodePolicy,
) -> Result<EpisodeLog> {
    let (mut env, mut obs) = DriveEnv::new(route, seed, settings)?;
    policy.begin();
    let mut prev = None;
    while !env.is_done() {
        let a = policy.act(&env, &obs, prev)?;
        obs = env.step(a)?.obs;
        prev = Some(a);
    }
    Ok(env.log())
}

/// World seed of the `index`-th evaluation route.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Evaluates every route in order, one episode each.
pub fn evaluate(
    routes: &[BenchmarkRoute],
    seed: u64,
    settings: &EnvSettings,
    policy: &mut dyn EpisodePolicy,
) -> Result<Vec<EpisodeLog>> {
    routes
        .iter()
        .enumerate()
        .map(|(i, r)| run_episode(r, eval_seed(seed, i), settings, policy))
        .collect()
}
