//! Non-ego actors and their scripted behaviour.

use serde::{Deserialize, Serialize};

use super::Pose;
use crate::geom::{Polyline, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
    Bicycle,
    Emergency,
    Obstacle,
}

impl ActorKind {
    /// Collision disc radius in meters.
    pub fn radius(self) -> f64 {
        match self {
            ActorKind::Vehicle | ActorKind::Emergency => 1.2,
            ActorKind::Pedestrian => 0.4,
            ActorKind::Bicycle => 0.6,
            ActorKind::Obstacle => 1.0,
        }
    }
}

const ACCEL: f64 = 3.0;
const DECEL: f64 = 8.0;
/// Car-following time headway, standstill gap and look-ahead.
const HEADWAY: f64 = 1.5;
const MIN_GAP: f64 = 2.0;
const LOOK_AHEAD: f64 = 40.0;
const LATERAL_MARGIN: f64 = 0.1;

/// Motion along a fixed path.
#[derive(Clone, Debug, PartialEq)]
pub struct Mover {
    pub path: Polyline,
    pub s: f64,
    pub speed: f64,
    pub cruise: f64,
    /// Slows down for actors ahead in its lane.
    pub follow: bool,
    /// Leaves the world at the end of the path; otherwise it stops there.
    pub despawn_at_end: bool,
}

impl Mover {
    pub fn new(path: Polyline, s: f64, speed: f64, cruise: f64, follow: bool) -> Self {
        Self {
            path,
            s,
            speed,
            cruise,
            follow,
            despawn_at_end: true,
        }
    }

    pub fn pose(&self) -> Pose {
        let p = self.path.point_at(self.s);
        Pose::new(p.x, p.y, self.path.heading_at(self.s), self.speed)
    }

    /// Moves towards `desired` speed within acceleration limits; returns
    /// true once the end of the path is reached.
    pub fn advance(&mut self, desired: f64, dt: f64) -> bool {
        self.speed = if desired > self.speed {
            (self.speed + ACCEL * dt).min(desired)
        } else {
            (self.speed - DECEL * dt).max(desired)
        };
        self.s += self.speed * dt;
        if self.s >= self.path.length() {
            self.s = self.path.length();
            self.speed = 0.0;
            return true;
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrakePhase {
    Dormant,
    Cruise,
    Braking,
    Hold(u32),
    Resume,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Script {
    /// Never moves.
    Static,
    /// Constant velocity along the initial heading.
    Straight,
    /// Flow member: cruises along its path.
    Flow(Mover),
    /// Lead vehicle that starts when the ego approaches, brakes to a stop
    /// after `brake_at`, holds, then drives on.
    HardBrake {
        mover: Mover,
        trigger: f64,
        brake_at: f64,
        hold_ticks: u32,
        phase: BrakePhase,
    },
    /// Stands still until the ego's progress reaches `trigger`, then moves.
    Triggered { mover: Mover, trigger: f64, started: bool },
    /// Approaches from behind once triggered; counts ticks spent held up by
    /// the ego.
    Emergency {
        mover: Mover,
        trigger: f64,
        start_gap: f64,
        started: bool,
        blocked_ticks: u32,
        reported: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Npc {
    pub id: u32,
    pub kind: ActorKind,
    pub pose: Pose,
    pub radius: f64,
    /// Present in the world: rendered and collidable.
    pub active: bool,
    pub script: Script,
}

impl Npc {
    pub fn is_dormant(&self) -> bool {
        match &self.script {
            Script::HardBrake { phase, .. } => *phase == BrakePhase::Dormant,
            Script::Triggered { started, .. } | Script::Emergency { started, .. } => !started,
            _ => false,
        }
    }
}

/// Disc seen by a path follower when checking the lane ahead.
#[derive(Clone, Copy, Debug)]
pub struct Blocker {
    pub id: Option<u32>,
    pub pos: Vec2,
    pub radius: f64,
}

/// Speed cap from the closest blocker ahead within the follower's lane and
/// whether that blocker is the ego (`id == None`).
pub fn following_limit(pose: &Pose, radius: f64, own: u32, blockers: &[Blocker]) -> (f64, bool) {
    let u = pose.forward();
    let n = u.left();
    let mut best = (f64::INFINITY, false);
    for b in blockers {
        if b.id == Some(own) {
            continue;
        }
        let rel = b.pos - pose.pos();
        let d = rel.dot(u);
        let l = rel.dot(n).abs();
        if d <= 0.0 || d > LOOK_AHEAD || l >= radius + b.radius + LATERAL_MARGIN {
            continue;
        }
        let gap = d - radius - b.radius;
        let cap = if gap < 0.5 { 0.0 } else { ((gap - MIN_GAP) / HEADWAY).max(0.0) };
        if cap < best.0 {
            best = (cap, b.id.is_none());
        }
    }
    best
}

/// Source of a vehicle stream along a path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSource {
    pub path: Polyline,
    /// Ego progress at which the flow starts.
    pub trigger: f64,
    pub started: bool,
    pub speed: (f64, f64),
    pub interval: (f64, f64),
    /// Distance the newest member must travel before the next spawns.
    pub next_gap: f64,
    pub newest: Option<u32>,
}
