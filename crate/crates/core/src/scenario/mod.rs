//! Routes, scenario archetypes, route splitting, scenario placement and
//! benchmark construction.

mod benchmark;
mod place;
mod routes;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};

pub use benchmark::{build_benchmark, Benchmark, BenchmarkConfig, BenchmarkRoute, BENCHMARK_FILE};
pub use place::{place_scenarios, randomize_params, segment_tags, SegmentTags, MIN_SPACING};
pub use routes::{build_route, route_for_kind, RouteShape, RouteShapeConfig};
pub use split::split_route;

/// Maximum length of a benchmark route in meters.
pub const MAX_BENCHMARK_ROUTE: f64 = 300.0;

/// Lane arrangement of the road a route runs on. Both layouts have two
/// lanes: the route follows the right one, the second lies to its left.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneLayout {
    /// Left lane carries oncoming traffic.
    #[default]
    TwoWay,
    /// Both lanes run in the route direction.
    OneWayTwoLane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Turn {
    Left,
    Right,
    Straight,
}

/// Four-way junction crossed by the route.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Junction {
    /// Arc length at which the route enters the junction.
    pub at: f64,
    /// Intersection point of the incoming and crossing road center lines.
    pub center: Vec2,
    pub heading_in: f64,
    pub turn: Turn,
}

impl Junction {
    pub fn heading_out(&self) -> f64 {
        use std::f64::consts::FRAC_PI_2;
        match self.turn {
            Turn::Left => self.heading_in + FRAC_PI_2,
            Turn::Right => self.heading_in - FRAC_PI_2,
            Turn::Straight => self.heading_in,
        }
    }

    /// Arc length of the stop line in front of the junction.
    pub fn stop_line(&self) -> f64 {
        (self.at - STOP_LINE_SETBACK).max(0.0)
    }
}

/// Distance between a stop line and the junction entry.
pub const STOP_LINE_SETBACK: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlKind {
    TrafficLight,
    StopSign,
}

/// Green / yellow / red durations in seconds and the phase at tick 0 as a
/// fraction of the full cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LightTiming {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
    pub phase: f64,
}

impl Default for LightTiming {
    fn default() -> Self {
        Self {
            green: 6.0,
            yellow: 2.0,
            red: 6.0,
            phase: 0.0,
        }
    }
}

/// Traffic control on the route at a stop line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ControlPlacement {
    pub kind: ControlKind,
    /// Arc length of the stop line.
    pub at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<LightTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RouteSpec {
    pub id: String,
    pub waypoints: Vec<Vec2>,
    pub lane_width: f64,
    #[serde(default)]
    pub layout: LaneLayout,
    #[serde(default)]
    pub controls: Vec<ControlPlacement>,
    #[serde(default)]
    pub junctions: Vec<Junction>,
}

impl RouteSpec {
    pub fn polyline(&self) -> Result<Polyline> {
        Polyline::new(self.waypoints.clone()).map_err(|e| match e {
            Error::MalformedRoute(m) => Error::MalformedRoute(format!("route {}: {m}", self.id)),
            e => e,
        })
    }

    pub fn length(&self) -> Result<f64> {
        Ok(self.polyline()?.length())
    }

    /// Checks waypoints, lane width and that markers lie on the route.
    pub fn validate(&self) -> Result<()> {
        let line = self.polyline()?;
        if !(self.lane_width.is_finite() && self.lane_width > 0.0) {
            return Err(Error::MalformedRoute(format!("route {}: lane-width must be positive", self.id)));
        }
        let len = line.length();
        for c in &self.controls {
            if !(0.0..=len).contains(&c.at) {
                return Err(Error::MalformedRoute(format!("route {}: control at {} off route", self.id, c.at)));
            }
        }
        for j in &self.junctions {
            if !(0.0..=len).contains(&j.at) || !j.center.is_finite() {
                return Err(Error::MalformedRoute(format!("route {}: junction at {} off route", self.id, j.at)));
            }
        }
        Ok(())
    }
}

/// Scenario archetypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    LaneFollow,
    VanillaTurn,
    RouteObstacleSameWay,
    RouteObstacleTwoWays,
    HardBrake,
    CutIn,
    DynamicObjectCrossing,
    SignalizedLeftTurn,
    NonSignalizedLeftTurn,
    RightTurnMergeFlow,
    EnterActorFlow,
    YieldToEmergencyVehicle,
}

/// Road situation an archetype must be placed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Situation {
    /// Straight road, optionally with a required lane layout.
    Straight(Option<LaneLayout>),
    /// A junction where the route makes the given turn.
    Junction(Turn),
    /// A junction where the route turns left or right.
    Turning,
}

/// Legal range and default of one scenario parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub default: f64,
}

const fn p(name: &'static str, lo: f64, hi: f64, default: f64) -> ParamRange {
    ParamRange { name, lo, hi, default }
}

const FLOW: [ParamRange; 4] = [
    p("flow-speed-min", 8.0, 18.0, 8.0),
    p("flow-speed-max", 8.0, 18.0, 18.0),
    p("flow-interval-min", 15.0, 50.0, 15.0),
    p("flow-interval-max", 15.0, 50.0, 50.0),
];

const OBSTACLE: [ParamRange; 5] = [p("obstacle-length", 3.0, 10.0, 5.0), FLOW[0], FLOW[1], FLOW[2], FLOW[3]];
const HARD_BRAKE: [ParamRange; 4] = [
    p("trigger-distance", 20.0, 40.0, 30.0),
    p("lead-speed", 4.0, 8.0, 6.0),
    p("brake-after", 10.0, 40.0, 20.0),
    p("hold-time", 1.0, 4.0, 2.0),
];
const CUT_IN: [ParamRange; 3] = [
    p("trigger-distance", 25.0, 40.0, 30.0),
    p("cut-in-speed", 5.0, 9.0, 7.0),
    p("merge-length", 10.0, 20.0, 15.0),
];
const CROSSING: [ParamRange; 2] = [p("trigger-distance", 15.0, 30.0, 22.0), p("walker-speed", 1.0, 2.0, 1.4)];
const SIGNALIZED: [ParamRange; 8] = [
    p("green-time", 4.0, 10.0, 6.0),
    p("yellow-time", 1.0, 3.0, 2.0),
    p("red-time", 4.0, 10.0, 6.0),
    p("phase", 0.0, 1.0, 0.0),
    FLOW[0],
    FLOW[1],
    FLOW[2],
    FLOW[3],
];
const EMERGENCY: [ParamRange; 3] = [
    p("trigger-distance", 20.0, 40.0, 30.0),
    p("emergency-speed", 12.0, 16.0, 14.0),
    p("start-gap", 30.0, 50.0, 40.0),
];

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 12] = [
        ScenarioKind::LaneFollow,
        ScenarioKind::VanillaTurn,
        ScenarioKind::RouteObstacleSameWay,
        ScenarioKind::RouteObstacleTwoWays,
        ScenarioKind::HardBrake,
        ScenarioKind::CutIn,
        ScenarioKind::DynamicObjectCrossing,
        ScenarioKind::SignalizedLeftTurn,
        ScenarioKind::NonSignalizedLeftTurn,
        ScenarioKind::RightTurnMergeFlow,
        ScenarioKind::EnterActorFlow,
        ScenarioKind::YieldToEmergencyVehicle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LaneFollow => "LaneFollow",
            ScenarioKind::VanillaTurn => "VanillaTurn",
            ScenarioKind::RouteObstacleSameWay => "RouteObstacleSameWay",
            ScenarioKind::RouteObstacleTwoWays => "RouteObstacleTwoWays",
            ScenarioKind::HardBrake => "HardBrake",
            ScenarioKind::CutIn => "CutIn",
            ScenarioKind::DynamicObjectCrossing => "DynamicObjectCrossing",
            ScenarioKind::SignalizedLeftTurn => "SignalizedLeftTurn",
            ScenarioKind::NonSignalizedLeftTurn => "NonSignalizedLeftTurn",
            ScenarioKind::RightTurnMergeFlow => "RightTurnMergeFlow",
            ScenarioKind::EnterActorFlow => "EnterActorFlow",
            ScenarioKind::YieldToEmergencyVehicle => "YieldToEmergencyVehicle",
        }
    }

    pub fn situation(self) -> Situation {
        use ScenarioKind::*;
        match self {
            LaneFollow | HardBrake | DynamicObjectCrossing => Situation::Straight(None),
            RouteObstacleSameWay | CutIn | YieldToEmergencyVehicle => Situation::Straight(Some(LaneLayout::OneWayTwoLane)),
            RouteObstacleTwoWays => Situation::Straight(Some(LaneLayout::TwoWay)),
            VanillaTurn => Situation::Turning,
            SignalizedLeftTurn | NonSignalizedLeftTurn => Situation::Junction(Turn::Left),
            RightTurnMergeFlow => Situation::Junction(Turn::Right),
            EnterActorFlow => Situation::Junction(Turn::Straight),
        }
    }

    pub fn params(self) -> &'static [ParamRange] {
        use ScenarioKind::*;
        match self {
            LaneFollow | VanillaTurn => &[],
            RouteObstacleSameWay | RouteObstacleTwoWays => &OBSTACLE,
            HardBrake => &HARD_BRAKE,
            CutIn => &CUT_IN,
            DynamicObjectCrossing => &CROSSING,
            SignalizedLeftTurn => &SIGNALIZED,
            NonSignalizedLeftTurn | RightTurnMergeFlow | EnterActorFlow => &FLOW,
            YieldToEmergencyVehicle => &EMERGENCY,
        }
    }

    pub fn default_params(self) -> BTreeMap<String, f64> {
        self.params().iter().map(|r| (r.name.to_string(), r.default)).collect()
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScenarioInstance {
    pub kind: ScenarioKind,
    pub anchor_distance: f64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ScenarioInstance {
    pub fn new(kind: ScenarioKind, anchor_distance: f64) -> Self {
        Self {
            kind,
            anchor_distance,
            params: kind.default_params(),
        }
    }

    /// Parameter value, falling back to the kind's default.
    pub fn param(&self, name: &str) -> f64 {
        self.params.get(name).copied().unwrap_or_else(|| {
            self.kind
                .params()
                .iter()
                .find(|r| r.name == name)
                .map(|r| r.default)
                .unwrap_or_else(|| panic!("{} has no parameter {name}", self.kind))
        })
    }

    /// Anchor within the route; parameters known and in range.
    pub fn validate(&self, route_length: f64) -> Result<()> {
        if !(0.0..=route_length).contains(&self.anchor_distance) {
            return Err(Error::Validation(format!(
                "{} anchor {} outside route of length {route_length}",
                self.kind, self.anchor_distance
            )));
        }
        for (name, &v) in &self.params {
            let r = self
                .kind
                .params()
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Validation(format!("{} has no parameter {name}", self.kind)))?;
            if !(r.lo..=r.hi).contains(&v) {
                return Err(Error::Validation(format!(
                    "{} parameter {name} = {v} outside [{}, {}]",
                    self.kind, r.lo, r.hi
                )));
            }
        }
        for (lo, hi) in [("flow-speed-min", "flow-speed-max"), ("flow-interval-min", "flow-interval-max")] {
            if self.params.contains_key(lo) && self.param(lo) > self.param(hi) {
                return Err(Error::Validation(format!("{}: {lo} exceeds {hi}", self.kind)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("Nope".parse::<ScenarioKind>().is_err());
    }

    #[test]
    fn defaults_are_in_range() {
        for k in ScenarioKind::ALL {
            ScenarioInstance::new(k, 0.0).validate(1.0).unwrap();
        }
    }

    #[test]
    fn out_of_range_param_is_rejected() {
        let mut s = ScenarioInstance::new(ScenarioKind::HardBrake, 10.0);
        s.params.insert("lead-speed".into(), 50.0);
        assert!(s.validate(100.0).is_err());
        let s = ScenarioInstance::new(ScenarioKind::HardBrake, 150.0);
        assert!(s.validate(100.0).is_err());
    }
}
