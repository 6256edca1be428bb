//! Parallel environments, one worker thread per slot. A finished slot
//! prepares its next route in the background while the others keep
//! stepping.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::ActionId;
use crate::bev::BevObservation;
use crate::error::{Error, Result};
use crate::replay::{SharedReplay, TransitionRecord};
use crate::scenario::{BenchmarkRoute, ScenarioKind};
use crate::sim::{DoneReason, StepResult};

use super::env::{DriveEnv, EnvSettings};

#[derive(Clone, Debug, Default)]
pub struct PoolConfig {
    pub num_envs: usize,
    pub seed: u64,
    pub settings: EnvSettings,
    /// Per-slot episode length cap; episodes cut by it count as truncated.
    pub truncate: Vec<Option<u64>>,
    /// Extra delay added to every environment construction.
    pub reset_delay: Duration,
}

enum Cmd {
    Start { route: Arc<BenchmarkRoute>, seed: u64 },
    Step(ActionId),
}

enum Reply {
    Started(usize, Result<BevObservation>),
    Stepped(usize, Result<(BevObservation, f64, StepResult)>),
}

/// Chooses actions for the slots that are ready to step.
pub trait Controller {
    /// `first[k]` marks the first frame of an episode, where `prev[k]` is
    /// `None`.
    fn act(
        &mut self,
        slots: &[usize],
        obs: &[&BevObservation],
        prev: &[Option<ActionId>],
        first: &[bool],
    ) -> Result<Vec<ActionId>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub slot: usize,
    pub route_id: String,
    pub kind: Option<ScenarioKind>,
    /// World seed the episode ran with.
    pub seed: u64,
    pub steps: usize,
    pub total_reward: f64,
    /// `None` for truncated episodes.
    pub done_reason: Option<DoneReason>,
    pub completion: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CollectStats {
    pub transitions: u64,
    pub episodes: Vec<EpisodeSummary>,
    /// Per-slot wall-clock times of every completed step.
    pub step_times: Vec<Vec<Instant>>,
}

enum Status {
    Resetting,
    Ready(BevObservation),
    Stepping,
}

struct Slot {
    tx: Sender<Cmd>,
    status: Status,
    rng: ChaCha8Rng,
    route: Option<Arc<BenchmarkRoute>>,
    seed: u64,
    records: Vec<TransitionRecord>,
    prev: Option<ActionId>,
    total_reward: f64,
}

pub struct EnvPool {
    cfg: PoolConfig,
    slots: Vec<Slot>,
    replies: Receiver<Reply>,
    workers: Vec<JoinHandle<()>>,
    routes: Arc<Vec<Arc<BenchmarkRoute>>>,
    replay: SharedReplay,
    failures: u64,
}

fn worker(slot: usize, settings: EnvSettings, delay: Duration, rx: Receiver<Cmd>, tx: Sender<Reply>) {
    let mut env: Option<DriveEnv> = None;
    for cmd in rx {
        let reply = match cmd {
            Cmd::Start { route, seed } => {
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                match DriveEnv::new(&route, seed, &settings) {
                    Ok((e, obs)) => {
                        env = Some(e);
                        Reply::Started(slot, Ok(obs))
                    }
                    Err(e) => {
                        env = None;
                        Reply::Started(slot, Err(e))
                    }
                }
            }
            Cmd::Step(a) => {
                let r = match env.as_mut() {
                    Some(e) => e.step(a).map(|s| (s.obs, s.reward, s.result)),
                    None => Err(Error::Usage("step on a slot without a world".into())),
                };
                Reply::Stepped(slot, r)
            }
        };
        if tx.send(reply).is_err() {
            return;
        }
    }
}

fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(slot as u64 + 1);
    r
}

impl EnvPool {
    /// Spawns the workers and starts an episode on every slot.
    pub fn new(cfg: PoolConfig, routes: Vec<BenchmarkRoute>, replay: SharedReplay) -> Result<Self> {
        if cfg.num_envs == 0 {
            return Err(Error::Validation("num-envs must be at least 1".into()));
        }
        let (reply_tx, replies) = channel();
        let mut slots = Vec::with_capacity(cfg.num_envs);
        let mut workers = Vec::with_capacity(cfg.num_envs);
        for i in 0..cfg.num_envs {
            let (tx, rx) = channel();
            let (settings, delay, rtx) = (cfg.settings.clone(), cfg.reset_delay, reply_tx.clone());
            let handle = std::thread::Builder::new()
                .name(format!("env-{i}"))
                .spawn(move || worker(i, settings, delay, rx, rtx))
                .map_err(|e| Error::Unavailable(format!("cannot spawn environment worker: {e}")))?;
            workers.push(handle);
            slots.push(Slot {
                tx,
                status: Status::Resetting,
                rng: slot_rng(cfg.seed, i),
                route: None,
                seed: 0,
                records: Vec::new(),
                prev: None,
                total_reward: 0.0,
            });
        }
        let mut pool = Self {
            cfg,
            slots,
            replies,
            workers,
            routes: Arc::new(Vec::new()),
            replay,
            failures: 0,
        };
        pool.set_routes(routes)?;
        for i in 0..pool.slots.len() {
            pool.start(i)?;
        }
        Ok(pool)
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    /// Environment constructions that failed and were retried.
    pub fn failures(&self) -> u64 {
        self.failures
    }

    /// Routes drawn for every later reset.
    pub fn set_routes(&mut self, routes: Vec<BenchmarkRoute>) -> Result<()> {
        if routes.is_empty() {
            return Err(Error::Validation("no routes to train on".into()));
        }
        self.routes = Arc::new(routes.into_iter().map(Arc::new).collect());
        Ok(())
    }

    fn start(&mut self, i: usize) -> Result<()> {
        let slot = &mut self.slots[i];
        let route = self.routes[slot.rng.gen_range(0..self.routes.len())].clone();
        let seed = slot.rng.gen();
        slot.route = Some(route.clone());
        slot.seed = seed;
        slot.status = Status::Resetting;
        slot.tx
            .send(Cmd::Start { route, seed })
            .map_err(|_| Error::Unavailable(format!("environment worker {i} exited")))
    }

    fn finish_episode(&mut self, i: usize, reason: Option<DoneReason>, completion: f64, stats: &mut CollectStats) -> Result<()> {
        let slot = &mut self.slots[i];
        let records = std::mem::take(&mut slot.records);
        let route = slot.route.as_ref().expect("slot has a route");
        stats.episodes.push(EpisodeSummary {
            slot: i,
            route_id: route.route.id.clone(),
            kind: route.kind,
            seed: slot.seed,
            steps: records.len() - 1,
            total_reward: slot.total_reward,
            done_reason: reason,
            completion,
        });
        self.replay.append(records)?;
        self.start(i)
    }

    fn handle(&mut self, reply: Reply, taken: &mut [u64], stats: &mut CollectStats) -> Result<()> {
        match reply {
            Reply::Started(i, Ok(obs)) => {
                let slot = &mut self.slots[i];
                slot.records = vec![TransitionRecord::new(&obs, None, 0.0, false)];
                slot.prev = None;
                slot.total_reward = 0.0;
                slot.status = Status::Ready(obs);
            }
            Reply::Started(i, Err(e)) => {
                self.failures += 1;
                let id = self.slots[i].route.as_ref().map(|r| r.route.id.clone()).unwrap_or_default();
                warn!("environment {i}: route {id} failed to load ({e}); drawing another");
                self.start(i)?;
            }
            Reply::Stepped(i, result) => {
                let (obs, reward, res) = result?;
                taken[i] += 1;
                stats.transitions += 1;
                stats.step_times[i].push(Instant::now());
                let limit = self.cfg.truncate.get(i).copied().flatten();
                let slot = &mut self.slots[i];
                slot.total_reward += reward;
                // timeouts and length caps truncate rather than terminate
                let terminal = res.done && res.done_reason != Some(DoneReason::Timeout);
                let action = slot.prev;
                slot.records.push(TransitionRecord::new(&obs, action, reward, terminal));
                let truncated = limit.is_some_and(|l| slot.records.len() as u64 > l);
                if res.done || truncated {
                    let reason = if terminal { res.done_reason } else { None };
                    self.finish_episode(i, reason, res.completion, stats)?;
                } else {
                    slot.status = Status::Ready(obs);
                }
            }
        }
        Ok(())
    }

    fn recv(&self) -> Result<Reply> {
        self.replies
            .recv()
            .map_err(|_| Error::Unavailable("environment workers exited".into()))
    }

    /// Steps every slot exactly `steps` times. Finished episodes are
    /// appended to the replay buffer as they end.
    pub fn collect(&mut self, steps: u64, controller: &mut dyn Controller) -> Result<CollectStats> {
        let n = self.slots.len();
        let mut taken = vec![0u64; n];
        let mut stats = CollectStats {
            step_times: vec![Vec::new(); n],
            ..Default::default()
        };
        loop {
            let ready: Vec<usize> = (0..n)
                .filter(|&i| taken[i] < steps && matches!(self.slots[i].status, Status::Ready(_)))
                .collect();
            if ready.is_empty() {
                if taken.iter().all(|&t| t >= steps) {
                    break;
                }
                let reply = self.recv()?;
                self.handle(reply, &mut taken, &mut stats)?;
                continue;
            }
            let mut obs = Vec::with_capacity(ready.len());
            let mut prev = Vec::with_capacity(ready.len());
            let mut first = Vec::with_capacity(ready.len());
            for &i in &ready {
                let s = &self.slots[i];
                let Status::Ready(o) = &s.status else { unreachable!() };
                obs.push(o);
                prev.push(s.prev);
                first.push(s.records.len() == 1);
            }
            let actions = controller.act(&ready, &obs, &prev, &first)?;
            if actions.len() != ready.len() {
                return Err(Error::Usage("controller returned the wrong number of actions".into()));
            }
            for (&i, &a) in ready.iter().zip(&actions) {
                let slot = &mut self.slots[i];
                slot.prev = Some(a);
                slot.status = Status::Stepping;
                slot.tx
                    .send(Cmd::Step(a))
                    .map_err(|_| Error::Unavailable(format!("environment worker {i} exited")))?;
            }
            while self.slots.iter().any(|s| matches!(s.status, Status::Stepping)) {
                let reply = self.recv()?;
                self.handle(reply, &mut taken, &mut stats)?;
            }
        }
        Ok(stats)
    }
}

impl Drop for EnvPool {
    fn drop(&mut self) {
        self.slots.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
