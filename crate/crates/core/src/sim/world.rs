use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::actors::{following_limit, ActorKind, Blocker, BrakePhase, FlowSource, Mover, Npc, Script};
use super::{kinematic_step, Control, Pose, VehicleParams};
use crate::actions::{self, ActionId};
use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};
use crate::reward::{self, Hazard, HazardKind, RewardConfig, RewardTerms};
use crate::scenario::{ControlKind, LaneLayout, LightTiming, RouteSpec, ScenarioInstance, ScenarioKind, Turn};

pub const EGO_RADIUS: f64 = 1.2;

/// Ego progress is searched this far behind / ahead of the previous value.
const PROJECT_BACK: f64 = 5.0;
const PROJECT_AHEAD: f64 = 20.0;
/// Distance from the route end that counts as arrival.
const ARRIVAL_TOLERANCE: f64 = 0.5;
/// Range along the route scanned for hazards.
const HAZARD_RANGE: f64 = 40.0;
const HAZARD_MARGIN: f64 = 0.5;
/// Braking deceleration of a hard-braking lead vehicle.
const LEAD_DECEL: f64 = 8.0;
/// Lateral offset of an emergency vehicle from the ego lane center.
const EMERGENCY_OFFSET: f64 = 1.6;
/// Ticks an emergency vehicle may be held up before the ego is charged.
const YIELD_TICKS: u32 = 30;
/// Flows start this far before their scenario anchor.
const FLOW_LEAD: f64 = 60.0;
/// Clearance required at a flow's spawn point.
const SPAWN_CLEARANCE: f64 = 6.0;
/// Spacing of obstacle discs along the blocked stretch.
const OBSTACLE_SPACING: f64 = 1.5;
/// Length of the crossing roads drawn at junctions.
const CROSS_ROAD: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct SimConfig {
    pub vehicle: VehicleParams,
    /// Seconds per tick.
    pub dt: f64,
    /// Consecutive ticks below `block-speed` that end an episode.
    pub block_ticks: u32,
    pub block_speed: f64,
    /// Speed that counts as a full stop at a stop sign.
    pub stop_speed: f64,
    /// Length of the zone before a stop line in which the stop must happen.
    pub stop_zone: f64,
    /// Episode budget as a multiple of route length / target speed.
    pub timeout_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            dt: 0.1,
            block_ticks: 100,
            block_speed: 0.1,
            stop_speed: 0.5,
            stop_zone: 4.0,
            timeout_factor: 4.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vehicle;
        let ok = self.dt > 0.0
            && self.block_ticks > 0
            && self.block_speed >= 0.0
            && self.stop_speed > 0.0
            && self.stop_zone > 0.0
            && self.timeout_factor > 0.0
            && v.wheelbase > 0.0
            && v.a_max >= 0.0
            && v.b_max >= 0.0
            && v.v_max > 0.0
            && v.drag >= 0.0
            && v.delta_max > 0.0
            && v.delta_max < std::f64::consts::FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("simulator parameters out of range".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfractionKind {
    CollisionPedestrian,
    CollisionVehicle,
    CollisionLayout,
    RedLight,
    StopSign,
    AgentBlocked,
    /// Held up an emergency vehicle approaching from behind.
    YieldEmergency,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 7] = [
        InfractionKind::CollisionPedestrian,
        InfractionKind::CollisionVehicle,
        InfractionKind::CollisionLayout,
        InfractionKind::RedLight,
        InfractionKind::StopSign,
        InfractionKind::AgentBlocked,
        InfractionKind::YieldEmergency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InfractionKind::CollisionPedestrian => "collision-pedestrian",
            InfractionKind::CollisionVehicle => "collision-vehicle",
            InfractionKind::CollisionLayout => "collision-layout",
            InfractionKind::RedLight => "red-light",
            InfractionKind::StopSign => "stop-sign",
            InfractionKind::AgentBlocked => "agent-blocked",
            InfractionKind::YieldEmergency => "yield-emergency",
        }
    }

    /// Default multiplicative penalty.
    pub fn default_penalty(self) -> f64 {
        match self {
            InfractionKind::CollisionPedestrian => 0.5,
            InfractionKind::CollisionVehicle => 0.6,
            InfractionKind::CollisionLayout => 0.65,
            InfractionKind::RedLight => 0.7,
            InfractionKind::StopSign => 0.8,
            InfractionKind::AgentBlocked => 0.7,
            InfractionKind::YieldEmergency => 0.7,
        }
    }

    pub fn is_collision(self) -> bool {
        matches!(
            self,
            InfractionKind::CollisionPedestrian | InfractionKind::CollisionVehicle | InfractionKind::CollisionLayout
        )
    }
}

impl std::fmt::Display for InfractionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InfractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InfractionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownInfraction(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub tick: u64,
    pub penalty: f64,
}

impl InfractionEvent {
    pub fn new(kind: InfractionKind, tick: u64) -> Self {
        Self {
            kind,
            tick,
            penalty: kind.default_penalty(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoneReason {
    RouteComplete,
    Collision,
    Deviation,
    Blocked,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightState {
    Green,
    Yellow,
    Red,
}

/// Traffic light or stop sign on the route.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficControl {
    pub kind: ControlKind,
    /// Arc length of the stop line on the reference path.
    pub at: f64,
    pub pos: Vec2,
    pub timing: LightTiming,
    pub light: LightState,
    /// The ego came to a stop inside the zone before this stop sign.
    pub stopped: bool,
}

impl TrafficControl {
    fn light_at(timing: &LightTiming, time: f64) -> LightState {
        let cycle = timing.green + timing.yellow + timing.red;
        if cycle <= 0.0 {
            return LightState::Green;
        }
        let m = (time + timing.phase * cycle).rem_euclid(cycle);
        if m < timing.green {
            LightState::Green
        } else if m < timing.green + timing.yellow {
            LightState::Yellow
        } else {
            LightState::Red
        }
    }

    /// Red or yellow light.
    pub fn is_stop_light(&self) -> bool {
        self.kind == ControlKind::TrafficLight && self.light != LightState::Green
    }
}

/// Drivable band `lo..hi` meters to the left of `line`.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub line: Polyline,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkingKind {
    /// Road boundary.
    Edge,
    /// Divider between opposing lanes.
    Yellow,
    /// Divider between lanes of the same direction.
    White,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marking {
    pub line: Polyline,
    pub kind: MarkingKind,
}

/// Static road geometry around the route.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoadLayout {
    pub bands: Vec<Band>,
    pub markings: Vec<Marking>,
}

impl RoadLayout {
    fn build(route: &RouteSpec, base: &Polyline) -> Self {
        let w = route.lane_width;
        let mut bands = vec![Band {
            line: base.clone(),
            lo: -0.5 * w,
            hi: 1.5 * w,
        }];
        let divider = match route.layout {
            LaneLayout::TwoWay => MarkingKind::Yellow,
            LaneLayout::OneWayTwoLane => MarkingKind::White,
        };
        let mut markings = vec![
            Marking {
                line: base.offset_by(|_| -0.5 * w),
                kind: MarkingKind::Edge,
            },
            Marking {
                line: base.offset_by(|_| 1.5 * w),
                kind: MarkingKind::Edge,
            },
            Marking {
                line: base.offset_by(|_| 0.5 * w),
                kind: divider,
            },
        ];
        for j in &route.junctions {
            let out = Vec2::from_heading(j.heading_out());
            let cross = match j.turn {
                Turn::Straight => {
                    let n = Vec2::from_heading(j.heading_in).left();
                    Band {
                        line: straight(j.center - n * CROSS_ROAD, j.center + n * CROSS_ROAD),
                        lo: -w,
                        hi: w,
                    }
                }
                _ => Band {
                    line: straight(j.center - out * CROSS_ROAD, j.center + out * CROSS_ROAD),
                    lo: -0.5 * w,
                    hi: 1.5 * w,
                },
            };
            markings.push(Marking {
                line: cross.line.offset_by(|_| 0.5 * (cross.lo + cross.hi)),
                kind: MarkingKind::Yellow,
            });
            bands.push(cross);
            if j.turn != Turn::Straight {
                let entry = base.point_at(j.at);
                let u = Vec2::from_heading(j.heading_in);
                bands.push(Band {
                    line: straight(entry, entry + u * CROSS_ROAD),
                    lo: -0.5 * w,
                    hi: 1.5 * w,
                });
            }
        }
        Self { bands, markings }
    }
}

fn straight(a: Vec2, b: Vec2) -> Polyline {
    Polyline::new(vec![a, b]).expect("distinct end points")
}

/// Outcome of one simulator tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StepResult {
    pub reward_terms: RewardTerms,
    pub infractions: Vec<InfractionEvent>,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
    pub completion: f64,
    /// Arc length of the ego projection on the reference path.
    pub progress: f64,
    pub lateral_offset: f64,
    pub speed: f64,
    pub tick: u64,
}

/// Complete simulator state. Cloning a world and replaying the same actions
/// reproduces the same results bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    cfg: SimConfig,
    reward: RewardConfig,
    route: RouteSpec,
    scenarios: Vec<ScenarioInstance>,
    base: Polyline,
    path: Polyline,
    road: RoadLayout,
    ego: Pose,
    last_control: Control,
    npcs: Vec<Npc>,
    flows: Vec<FlowSource>,
    controls: Vec<TrafficControl>,
    rng: ChaCha8Rng,
    next_id: u32,
    tick: u64,
    time: f64,
    progress: f64,
    prev_progress: f64,
    max_progress: f64,
    lateral: f64,
    slow_ticks: u32,
    timeout_ticks: u64,
    yield_events: Vec<InfractionEvent>,
    done: Option<DoneReason>,
}

/// World with default simulator and reward settings.
pub fn create_world(route: &RouteSpec, scenarios: &[ScenarioInstance], seed: u64) -> Result<World> {
    World::new(route, scenarios, seed, &SimConfig::default(), &RewardConfig::default())
}

/// Lateral profile that moves the reference path one lane to the left around
/// a blocked stretch `[a, a + len]`.
fn detour(s: f64, a: f64, len: f64, w: f64) -> f64 {
    let ramp = |x: f64| x.clamp(0.0, 1.0);
    if s < a + len {
        w * ramp((s - (a - 20.0)) / 15.0)
    } else {
        w * ramp(((a + len + 20.0) - s) / 15.0)
    }
}

impl World {
    pub fn new(
        route: &RouteSpec,
        scenarios: &[ScenarioInstance],
        seed: u64,
        cfg: &SimConfig,
        reward: &RewardConfig,
    ) -> Result<Self> {
        route.validate()?;
        cfg.validate()?;
        reward.validate()?;
        let base = route.polyline()?;
        let len = base.length();
        for s in scenarios {
            s.validate(len)?;
        }
        let w = route.lane_width;
        let obstacles: Vec<(f64, f64)> = scenarios
            .iter()
            .filter(|s| matches!(s.kind, ScenarioKind::RouteObstacleTwoWays | ScenarioKind::RouteObstacleSameWay))
            .map(|s| (s.anchor_distance, s.param("obstacle-length")))
            .collect();
        let path = if obstacles.is_empty() {
            base.clone()
        } else {
            base.offset_by(|s| obstacles.iter().map(|&(a, l)| detour(s, a, l, w)).fold(0.0, f64::max))
        };
        let start = base.point_at(0.0);
        let timeout_ticks = (cfg.timeout_factor * len / reward.v_target / cfg.dt).ceil() as u64;
        let mut world = Self {
            cfg: cfg.clone(),
            reward: reward.clone(),
            route: route.clone(),
            scenarios: scenarios.to_vec(),
            road: RoadLayout::build(route, &base),
            base,
            path,
            ego: Pose::new(start.x, start.y, 0.0, 0.0),
            last_control: Control::default(),
            npcs: Vec::new(),
            flows: Vec::new(),
            controls: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 0,
            tick: 0,
            time: 0.0,
            progress: 0.0,
            prev_progress: 0.0,
            max_progress: 0.0,
            lateral: 0.0,
            slow_ticks: 0,
            timeout_ticks,
            yield_events: Vec::new(),
            done: None,
        };
        world.ego.heading = world.path.heading_at(0.0);
        for c in &route.controls {
            world.add_control(c.kind, c.at, c.timing.unwrap_or_default());
        }
        for s in scenarios {
            world.instantiate(s);
        }
        Ok(world)
    }

    fn spawn(&mut self, kind: ActorKind, pose: Pose, active: bool, script: Script) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        self.npcs.push(Npc {
            id,
            kind,
            pose,
            radius: kind.radius(),
            active,
            script,
        });
        id
    }

    /// Places an actor that stands still (speed 0) or moves in a straight
    /// line at the pose's speed.
    pub fn add_actor(&mut self, kind: ActorKind, pose: Pose) -> u32 {
        let script = if pose.speed > 0.0 { Script::Straight } else { Script::Static };
        self.spawn(kind, pose, true, script)
    }

    pub fn add_control(&mut self, kind: ControlKind, at: f64, timing: LightTiming) {
        let at = at.clamp(0.0, self.path.length());
        let light = TrafficControl::light_at(&timing, self.time);
        self.controls.push(TrafficControl {
            kind,
            at,
            pos: self.path.point_at(at),
            timing,
            light,
            stopped: false,
        });
    }

    /// Closest junction to an arc length.
    fn junction_near(&self, s: f64) -> Option<crate::scenario::Junction> {
        self.route
            .junctions
            .iter()
            .copied()
            .min_by(|a, b| (a.at - s).abs().total_cmp(&(b.at - s).abs()))
    }

    fn add_flow(&mut self, path: Polyline, trigger: f64, s: &ScenarioInstance) {
        self.flows.push(FlowSource {
            path,
            trigger,
            started: false,
            speed: (s.param("flow-speed-min"), s.param("flow-speed-max")),
            interval: (s.param("flow-interval-min"), s.param("flow-interval-max")),
            next_gap: 0.0,
            newest: None,
        });
    }

    fn instantiate(&mut self, s: &ScenarioInstance) {
        let a = s.anchor_distance;
        let w = self.route.lane_width;
        let len = self.base.length();
        let trigger = |d: f64| (a - d).max(0.0);
        match s.kind {
            ScenarioKind::LaneFollow | ScenarioKind::VanillaTurn => {}
            ScenarioKind::HardBrake => {
                let mover = Mover::new(self.base.clone(), a, 0.0, s.param("lead-speed"), true);
                let hold = (s.param("hold-time") / self.cfg.dt).round() as u32;
                let script = Script::HardBrake {
                    trigger: trigger(s.param("trigger-distance")),
                    brake_at: (a + s.param("brake-after")).min(len),
                    hold_ticks: hold,
                    phase: BrakePhase::Dormant,
                    mover: mover.clone(),
                };
                self.spawn(ActorKind::Vehicle, mover.pose(), true, script);
            }
            ScenarioKind::CutIn => {
                let start = (a - 10.0).max(0.0);
                let merge = s.param("merge-length");
                let path = self
                    .base
                    .offset_by(|x| w * (1.0 - ((x - a) / merge).clamp(0.0, 1.0)))
                    .slice(start, len);
                let mover = Mover::new(path, 0.0, 0.0, s.param("cut-in-speed"), true);
                let script = Script::Triggered {
                    trigger: trigger(10.0 + s.param("trigger-distance")),
                    started: false,
                    mover: mover.clone(),
                };
                self.spawn(ActorKind::Vehicle, mover.pose(), true, script);
            }
            ScenarioKind::DynamicObjectCrossing => {
                let c = self.base.point_at(a);
                let n = self.base.direction_at(a).left();
                let path = straight(c - n * (0.5 * w + 2.5), c + n * (1.5 * w + 2.5));
                let speed = s.param("walker-speed");
                let mut mover = Mover::new(path, 0.0, 0.0, speed, false);
                mover.despawn_at_end = true;
                let script = Script::Triggered {
                    trigger: trigger(s.param("trigger-distance")),
                    started: false,
                    mover: mover.clone(),
                };
                self.spawn(ActorKind::Pedestrian, mover.pose(), true, script);
            }
            ScenarioKind::RouteObstacleTwoWays | ScenarioKind::RouteObstacleSameWay => {
                let l = s.param("obstacle-length");
                let n = (l / OBSTACLE_SPACING).floor() as usize + 1;
                for i in 0..n {
                    let at = (a + i as f64 * OBSTACLE_SPACING).min(len);
                    let p = self.base.point_at(at);
                    let pose = Pose::new(p.x, p.y, self.base.heading_at(at), 0.0);
                    self.spawn(ActorKind::Obstacle, pose, true, Script::Static);
                }
                let lane = self.base.offset_by(|_| w);
                let path = if s.kind == ScenarioKind::RouteObstacleTwoWays {
                    lane.slice(a - FLOW_LEAD, a + 100.0).reversed()
                } else {
                    lane.slice(a - 80.0, a + 60.0)
                };
                self.add_flow(path, trigger(FLOW_LEAD), s);
            }
            ScenarioKind::YieldToEmergencyVehicle => {
                let path = self.base.offset_by(|_| EMERGENCY_OFFSET);
                let mover = Mover::new(path, 0.0, 0.0, s.param("emergency-speed"), true);
                let script = Script::Emergency {
                    trigger: trigger(s.param("trigger-distance")),
                    start_gap: s.param("start-gap"),
                    started: false,
                    blocked_ticks: 0,
                    reported: false,
                    mover: mover.clone(),
                };
                self.spawn(ActorKind::Emergency, mover.pose(), false, script);
            }
            ScenarioKind::SignalizedLeftTurn | ScenarioKind::NonSignalizedLeftTurn => {
                let Some(j) = self.junction_near(a) else { return };
                if s.kind == ScenarioKind::SignalizedLeftTurn {
                    let timing = LightTiming {
                        green: s.param("green-time"),
                        yellow: s.param("yellow-time"),
                        red: s.param("red-time"),
                        phase: s.param("phase"),
                    };
                    self.add_control(ControlKind::TrafficLight, j.stop_line(), timing);
                } else {
                    self.add_control(ControlKind::StopSign, j.stop_line(), LightTiming::default());
                }
                let v = self.base.point_at(j.at);
                let u = Vec2::from_heading(j.heading_in);
                let n = u.left();
                let path = straight(v + u * 40.0 + n * w, v - u * 60.0 + n * w);
                self.add_flow(path, trigger(FLOW_LEAD), s);
            }
            ScenarioKind::RightTurnMergeFlow => {
                let Some(j) = self.junction_near(a) else { return };
                let out = Vec2::from_heading(j.heading_out());
                let path = straight(j.center - out * 50.0, j.center + out * 60.0);
                self.add_flow(path, trigger(FLOW_LEAD), s);
            }
            ScenarioKind::EnterActorFlow => {
                let Some(j) = self.junction_near(a) else { return };
                let n = Vec2::from_heading(j.heading_in).left();
                let path = straight(j.center + n * 50.0, j.center - n * 50.0);
                self.add_flow(path, trigger(FLOW_LEAD), s);
            }
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn route(&self) -> &RouteSpec {
        &self.route
    }

    pub fn scenarios(&self) -> &[ScenarioInstance] {
        &self.scenarios
    }

    /// Path the ego is expected to follow: the route with lane changes around
    /// blocked stretches.
    pub fn reference_path(&self) -> &Polyline {
        &self.path
    }

    pub fn road(&self) -> &RoadLayout {
        &self.road
    }

    pub fn ego(&self) -> &Pose {
        &self.ego
    }

    pub fn set_ego(&mut self, pose: Pose) {
        self.ego = pose;
        let p = self.path.project(pose.pos());
        self.progress = p.s;
        self.prev_progress = p.s;
        self.max_progress = self.max_progress.max(p.s);
        self.lateral = p.offset;
    }

    pub fn last_control(&self) -> Control {
        self.last_control
    }

    pub fn npcs(&self) -> &[Npc] {
        &self.npcs
    }

    pub fn controls(&self) -> &[TrafficControl] {
        &self.controls
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn timeout_ticks(&self) -> u64 {
        self.timeout_ticks
    }

    pub fn done(&self) -> Option<DoneReason> {
        self.done
    }

    pub fn completion(&self) -> f64 {
        let len = self.path.length();
        if self.max_progress >= len - ARRIVAL_TOLERANCE {
            1.0
        } else {
            (self.max_progress / len).clamp(0.0, 1.0)
        }
    }

    /// Arc length along the reference path and signed lateral offset (left
    /// positive).
    pub fn route_progress(&self) -> (f64, f64) {
        (self.progress, self.lateral)
    }

    /// Actors, red/yellow lights and pending stop signs ahead of the ego.
    pub fn hazards(&self) -> Vec<Hazard> {
        let s = self.progress;
        let mut out = Vec::new();
        for npc in self.npcs.iter().filter(|n| n.active) {
            let p = self.path.project_window(npc.pose.pos(), s, s + HAZARD_RANGE);
            if p.s <= s || p.distance >= EGO_RADIUS + npc.radius + HAZARD_MARGIN {
                continue;
            }
            let kind = match npc.kind {
                ActorKind::Vehicle => HazardKind::Vehicle,
                ActorKind::Pedestrian => HazardKind::Pedestrian,
                ActorKind::Bicycle => HazardKind::Bicycle,
                ActorKind::Emergency => HazardKind::Emergency,
                ActorKind::Obstacle => HazardKind::Obstacle,
            };
            out.push(Hazard {
                kind,
                gap: (p.s - s - EGO_RADIUS - npc.radius).max(0.0),
            });
        }
        for c in &self.controls {
            if c.at <= s || c.at > s + HAZARD_RANGE {
                continue;
            }
            let kind = match c.kind {
                ControlKind::TrafficLight if c.is_stop_light() => HazardKind::TrafficLight,
                ControlKind::StopSign if !c.stopped => HazardKind::StopSign,
                _ => continue,
            };
            out.push(Hazard {
                kind,
                gap: (c.at - s - EGO_RADIUS).max(0.0),
            });
        }
        out
    }

    pub fn speed_reward(&self) -> f64 {
        reward::speed_reward(self.ego.speed, &self.hazards(), &self.reward)
    }

    /// Infractions visible in the current state: overlaps with actors,
    /// stop lines crossed during the last tick, a blocked ego and held-up
    /// emergency vehicles.
    pub fn detect_infractions(&self) -> Vec<InfractionEvent> {
        let mut out = Vec::new();
        let ego = self.ego.pos();
        for npc in self.npcs.iter().filter(|n| n.active) {
            if discs_overlap(ego, EGO_RADIUS, npc.pose.pos(), npc.radius) {
                let kind = match npc.kind {
                    ActorKind::Pedestrian => InfractionKind::CollisionPedestrian,
                    ActorKind::Obstacle => InfractionKind::CollisionLayout,
                    _ => InfractionKind::CollisionVehicle,
                };
                out.push(InfractionEvent::new(kind, self.tick));
            }
        }
        for c in &self.controls {
            if !(self.prev_progress < c.at && c.at <= self.progress) {
                continue;
            }
            match c.kind {
                ControlKind::TrafficLight if c.light == LightState::Red => {
                    out.push(InfractionEvent::new(InfractionKind::RedLight, self.tick))
                }
                ControlKind::StopSign if !c.stopped => out.push(InfractionEvent::new(InfractionKind::StopSign, self.tick)),
                _ => {}
            }
        }
        if self.slow_ticks >= self.cfg.block_ticks {
            out.push(InfractionEvent::new(InfractionKind::AgentBlocked, self.tick));
        }
        out.extend(self.yield_events.iter().copied());
        out
    }

    pub fn step(&mut self, action: ActionId) -> Result<StepResult> {
        self.step_dt(action, self.cfg.dt)
    }

    pub fn step_dt(&mut self, action: ActionId, dt: f64) -> Result<StepResult> {
        if self.done.is_some() {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Usage(format!("dt must be positive, got {dt}")));
        }
        let control = actions::control(action)?;
        self.time += dt;
        for c in &mut self.controls {
            c.light = TrafficControl::light_at(&c.timing, self.time);
        }
        self.yield_events.clear();
        self.advance_npcs(dt);
        self.ego = kinematic_step(self.ego, control, dt, &self.cfg.vehicle);
        self.tick += 1;

        let proj = self
            .path
            .project_window(self.ego.pos(), self.progress - PROJECT_BACK, self.progress + PROJECT_AHEAD);
        self.prev_progress = self.progress;
        self.progress = proj.s;
        self.lateral = proj.offset;
        let gained = (proj.s - self.max_progress).max(0.0);
        self.max_progress += gained;

        for c in &mut self.controls {
            if c.kind == ControlKind::StopSign
                && self.ego.speed < self.cfg.stop_speed
                && self.progress >= c.at - self.cfg.stop_zone
                && self.progress <= c.at
            {
                c.stopped = true;
            }
        }
        let hazards = self.hazards();
        let v_des = reward::desired_speed(&hazards, &self.reward);
        if self.ego.speed < self.cfg.block_speed && v_des > 1.0 {
            self.slow_ticks += 1;
        } else {
            self.slow_ticks = 0;
        }
        let infractions = self.detect_infractions();

        let terms = RewardTerms {
            r_speed: reward::speed_reward(self.ego.speed, &hazards, &self.reward),
            r_travel: reward::travel_reward(gained),
            p_deviation: reward::deviation_penalty(self.lateral, self.reward.d_max),
            c_steer: reward::steering_cost(control.steer, self.last_control.steer),
        };
        self.last_control = control;

        let completion = self.completion();
        self.done = if infractions.iter().any(|i| i.kind.is_collision()) {
            Some(DoneReason::Collision)
        } else if self.lateral.abs() > self.reward.d_max {
            Some(DoneReason::Deviation)
        } else if completion >= 1.0 {
            Some(DoneReason::RouteComplete)
        } else if self.slow_ticks >= self.cfg.block_ticks {
            Some(DoneReason::Blocked)
        } else if self.tick >= self.timeout_ticks {
            Some(DoneReason::Timeout)
        } else {
            None
        };
        Ok(StepResult {
            reward_terms: terms,
            infractions,
            done: self.done.is_some(),
            done_reason: self.done,
            completion,
            progress: self.progress,
            lateral_offset: self.lateral,
            speed: self.ego.speed,
            tick: self.tick,
        })
    }

    fn blockers(&self) -> Vec<Blocker> {
        let mut v: Vec<Blocker> = self
            .npcs
            .iter()
            .filter(|n| n.active)
            .map(|n| Blocker {
                id: Some(n.id),
                pos: n.pose.pos(),
                radius: n.radius,
            })
            .collect();
        v.push(Blocker {
            id: None,
            pos: self.ego.pos(),
            radius: EGO_RADIUS,
        });
        v
    }

    fn advance_npcs(&mut self, dt: f64) {
        let ego_s = self.progress;
        self.start_flows();
        let blockers = self.blockers();
        let tick = self.tick + 1;
        let mut finished = Vec::new();
        for npc in &mut self.npcs {
            let (cap, by_ego) = following_limit(&npc.pose, npc.radius, npc.id, &blockers);
            match &mut npc.script {
                Script::Static => {}
                Script::Straight => {
                    let p = npc.pose;
                    let d = p.forward() * (p.speed * dt);
                    npc.pose = Pose { x: p.x + d.x, y: p.y + d.y, ..p };
                }
                Script::Flow(m) => {
                    let desired = if m.follow { m.cruise.min(cap) } else { m.cruise };
                    if m.advance(desired, dt) && m.despawn_at_end {
                        finished.push(npc.id);
                    }
                    npc.pose = m.pose();
                }
                Script::HardBrake {
                    mover,
                    trigger,
                    brake_at,
                    hold_ticks,
                    phase,
                } => {
                    let desired = match *phase {
                        BrakePhase::Dormant => {
                            if ego_s >= *trigger {
                                *phase = BrakePhase::Cruise;
                                mover.cruise
                            } else {
                                0.0
                            }
                        }
                        BrakePhase::Cruise => {
                            if mover.s >= *brake_at {
                                *phase = BrakePhase::Braking;
                                0.0
                            } else {
                                mover.cruise.min(cap)
                            }
                        }
                        BrakePhase::Braking => 0.0,
                        BrakePhase::Hold(n) => {
                            if n >= *hold_ticks {
                                *phase = BrakePhase::Resume;
                                mover.cruise.min(cap)
                            } else {
                                *phase = BrakePhase::Hold(n + 1);
                                0.0
                            }
                        }
                        BrakePhase::Resume => mover.cruise.min(cap),
                    };
                    if *phase == BrakePhase::Braking {
                        mover.speed = (mover.speed - LEAD_DECEL * dt).max(0.0);
                        mover.s = (mover.s + mover.speed * dt).min(mover.path.length());
                        if mover.speed == 0.0 {
                            *phase = BrakePhase::Hold(0);
                        }
                    } else if *phase != BrakePhase::Dormant && mover.advance(desired, dt) {
                        finished.push(npc.id);
                    }
                    npc.pose = mover.pose();
                }
                Script::Triggered { mover, trigger, started } => {
                    if !*started && ego_s >= *trigger {
                        *started = true;
                    }
                    if *started {
                        let desired = if mover.follow { mover.cruise.min(cap) } else { mover.cruise };
                        if mover.advance(desired, dt) && mover.despawn_at_end {
                            finished.push(npc.id);
                        }
                        npc.pose = mover.pose();
                    }
                }
                Script::Emergency {
                    mover,
                    trigger,
                    start_gap,
                    started,
                    blocked_ticks,
                    reported,
                } => {
                    if !*started {
                        if ego_s < *trigger {
                            continue;
                        }
                        *started = true;
                        npc.active = true;
                        mover.s = (ego_s - *start_gap).max(0.0);
                        mover.speed = mover.cruise;
                        npc.pose = mover.pose();
                        continue;
                    }
                    if by_ego && cap < mover.cruise {
                        *blocked_ticks += 1;
                        if *blocked_ticks >= YIELD_TICKS && !*reported {
                            *reported = true;
                            self.yield_events.push(InfractionEvent::new(InfractionKind::YieldEmergency, tick));
                        }
                    }
                    if mover.advance(mover.cruise.min(cap), dt) {
                        finished.push(npc.id);
                    }
                    npc.pose = mover.pose();
                }
            }
        }
        if !finished.is_empty() {
            for n in &mut self.npcs {
                if finished.contains(&n.id) {
                    n.active = false;
                }
            }
            self.npcs
                .retain(|n| n.active || !matches!(n.script, Script::Flow(_)));
        }
        self.spawn_flow_members();
    }

    fn start_flows(&mut self) {
        let ego_s = self.progress;
        for fi in 0..self.flows.len() {
            if self.flows[fi].started || ego_s < self.flows[fi].trigger {
                continue;
            }
            self.flows[fi].started = true;
            let (lo, hi) = self.flows[fi].interval;
            let len = self.flows[fi].path.length();
            // fill the path back to front so members ahead spawn first
            let mut positions = Vec::new();
            let mut s = self.rng.gen_range(lo..=hi);
            while s < len - 10.0 {
                positions.push(s);
                s += self.rng.gen_range(lo..=hi);
            }
            for &s in positions.iter().rev() {
                self.spawn_member(fi, s);
            }
            let first = positions.first().copied().unwrap_or(0.0);
            let gap = self.rng.gen_range(lo..=hi);
            self.flows[fi].next_gap = (gap - first).max(0.0);
        }
    }

    fn spawn_member(&mut self, fi: usize, s: f64) -> u32 {
        let (lo, hi) = self.flows[fi].speed;
        let speed = self.rng.gen_range(lo..=hi);
        let mover = Mover::new(self.flows[fi].path.clone(), s, speed, speed, true);
        let pose = mover.pose();
        let id = self.spawn(ActorKind::Vehicle, pose, true, Script::Flow(mover));
        self.flows[fi].newest = Some(id);
        id
    }

    fn spawn_flow_members(&mut self) {
        for fi in 0..self.flows.len() {
            if !self.flows[fi].started {
                continue;
            }
            let travelled = self.flows[fi]
                .newest
                .and_then(|id| self.npcs.iter().find(|n| n.id == id && n.active))
                .map(|n| match &n.script {
                    Script::Flow(m) => m.s,
                    _ => f64::INFINITY,
                })
                .unwrap_or(f64::INFINITY);
            if travelled < self.flows[fi].next_gap {
                continue;
            }
            let origin = self.flows[fi].path.point_at(0.0);
            let clear = self.npcs.iter().filter(|n| n.active).all(|n| n.pose.pos().dist(origin) > SPAWN_CLEARANCE)
                && self.ego.pos().dist(origin) > SPAWN_CLEARANCE;
            if !clear {
                continue;
            }
            self.spawn_member(fi, 0.0);
            let (lo, hi) = self.flows[fi].interval;
            self.flows[fi].next_gap = self.rng.gen_range(lo..=hi);
        }
    }
}

pub fn discs_overlap(a: Vec2, ra: f64, b: Vec2, rb: f64) -> bool {
    a.dist(b) < ra + rb
}
