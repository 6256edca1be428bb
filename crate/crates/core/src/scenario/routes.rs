//! Procedural route geometry.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Junction, LaneLayout, RouteSpec, ScenarioKind, Situation, Turn};
use crate::geom::Vec2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RouteShape {
    Straight,
    /// Approach, then a junction at which the route turns (or goes straight).
    Junction(Turn),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct RouteShapeConfig {
    pub lane_width: f64,
    pub min_length: f64,
    pub max_length: f64,
    /// Range of the straight approach before a junction.
    pub approach_min: f64,
    pub approach_max: f64,
    pub left_radius: f64,
    pub right_radius: f64,
}

impl Default for RouteShapeConfig {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            min_length: 120.0,
            max_length: 200.0,
            approach_min: 50.0,
            approach_max: 80.0,
            left_radius: 10.0,
            right_radius: 7.0,
        }
    }
}

const STRAIGHT_STEP: f64 = 2.0;
const ARC_STEP: f64 = 1.0;

fn push_straight(pts: &mut Vec<Vec2>, from: Vec2, dir: Vec2, len: f64) {
    let n = (len / STRAIGHT_STEP).ceil().max(1.0) as usize;
    for i in 1..=n {
        pts.push(from + dir * (len * i as f64 / n as f64));
    }
}

/// Builds a route of total length `length` starting at the origin.
pub fn build_route(
    id: &str,
    shape: RouteShape,
    layout: LaneLayout,
    length: f64,
    approach: f64,
    heading: f64,
    cfg: &RouteShapeConfig,
) -> RouteSpec {
    let u = Vec2::from_heading(heading);
    let origin = Vec2::new(0.0, 0.0);
    let mut pts = vec![origin];
    let mut junctions = Vec::new();
    match shape {
        RouteShape::Straight => push_straight(&mut pts, origin, u, length),
        RouteShape::Junction(Turn::Straight) => {
            push_straight(&mut pts, origin, u, length);
            junctions.push(Junction {
                at: approach,
                center: origin + u * (approach + cfg.lane_width),
                heading_in: heading,
                turn: Turn::Straight,
            });
        }
        RouteShape::Junction(turn) => {
            let (r, sign) = match turn {
                Turn::Left => (cfg.left_radius, 1.0),
                _ => (cfg.right_radius, -1.0),
            };
            push_straight(&mut pts, origin, u, approach);
            let entry = origin + u * approach;
            let pivot = entry + u.left() * (sign * r);
            let arc = FRAC_PI_2 * r;
            let n = (arc / ARC_STEP).ceil() as usize;
            for i in 1..=n {
                let a = FRAC_PI_2 * i as f64 / n as f64;
                let h = heading + sign * a;
                // point on the circle around `pivot` with tangent heading `h`
                pts.push(pivot - Vec2::from_heading(h).left() * (sign * r));
            }
            let exit = *pts.last().unwrap();
            let out = Vec2::from_heading(heading + sign * FRAC_PI_2);
            push_straight(&mut pts, exit, out, (length - approach - arc).max(STRAIGHT_STEP));
            junctions.push(Junction {
                at: approach,
                center: entry + u * r,
                heading_in: heading,
                turn,
            });
        }
    }
    RouteSpec {
        id: id.to_string(),
        waypoints: pts,
        lane_width: cfg.lane_width,
        layout,
        controls: Vec::new(),
        junctions,
    }
}

/// Random route whose road situation suits `kind` (any shape when `None`).
pub fn route_for_kind(id: &str, kind: Option<ScenarioKind>, cfg: &RouteShapeConfig, rng: &mut impl Rng) -> RouteSpec {
    let random_layout = |rng: &mut dyn rand::RngCore| {
        if rng.gen_bool(0.5) {
            LaneLayout::TwoWay
        } else {
            LaneLayout::OneWayTwoLane
        }
    };
    let (shape, layout) = match kind.map(|k| k.situation()) {
        None => {
            let shape = match rng.gen_range(0..3) {
                0 => RouteShape::Straight,
                1 => RouteShape::Junction(Turn::Left),
                _ => RouteShape::Junction(Turn::Right),
            };
            (shape, random_layout(rng))
        }
        Some(Situation::Straight(layout)) => (RouteShape::Straight, layout.unwrap_or_else(|| random_layout(rng))),
        Some(Situation::Junction(t)) => (RouteShape::Junction(t), LaneLayout::TwoWay),
        Some(Situation::Turning) => {
            let t = if rng.gen_bool(0.5) { Turn::Left } else { Turn::Right };
            (RouteShape::Junction(t), random_layout(rng))
        }
    };
    let length = rng.gen_range(cfg.min_length..=cfg.max_length);
    let approach = rng.gen_range(cfg.approach_min..=cfg.approach_max);
    let heading = rng.gen_range(-PI..PI);
    build_route(id, shape, layout, length, approach, heading, cfg)
}
