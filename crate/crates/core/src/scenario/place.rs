//! Road-situation tagging and scenario placement.

use std::collections::BTreeMap;

use rand::Rng;

use super::{RouteSpec, ScenarioInstance, ScenarioKind, Situation, Turn};
use crate::error::{Error, Result};
use crate::geom::wrap_angle;

/// Minimum distance between the anchors of two scenarios on one route.
pub const MIN_SPACING: f64 = 50.0;
/// Straight road needed before and after a straight-road anchor.
const STRAIGHT_BEFORE: f64 = 30.0;
const STRAIGHT_AFTER: f64 = 20.0;
/// Route span on either side of a junction entry tagged as junction.
const JUNCTION_BEFORE: f64 = 20.0;
const JUNCTION_AFTER: f64 = 25.0;
const CURVATURE_WINDOW: f64 = 2.5;
const STRAIGHT_TOLERANCE: f64 = 2.0 * std::f64::consts::PI / 180.0;

/// Per-meter road-situation tags along a route.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTags {
    /// Tag `i` describes arc length `i` meters.
    pub straight: Vec<bool>,
    pub junction: Vec<bool>,
    pub length: f64,
}

impl SegmentTags {
    fn range_is(&self, tags: &[bool], lo: f64, hi: f64) -> bool {
        if lo < 0.0 || hi > self.length {
            return false;
        }
        (lo.floor() as usize..=(hi.ceil() as usize).min(tags.len() - 1)).all(|i| tags[i])
    }

    /// True when `[lo, hi]` is straight road away from any junction.
    pub fn straight_between(&self, lo: f64, hi: f64) -> bool {
        let free: Vec<bool> = self.straight.iter().zip(&self.junction).map(|(s, j)| *s && !j).collect();
        self.range_is(&free, lo, hi)
    }
}

/// Tags every meter of `route` as straight (low curvature) and/or junction.
pub fn segment_tags(route: &RouteSpec) -> Result<SegmentTags> {
    let line = route.polyline()?;
    let len = line.length();
    let n = len.floor() as usize + 1;
    let mut straight = Vec::with_capacity(n);
    let mut junction = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64;
        let a = line.heading_at((s - CURVATURE_WINDOW).max(0.0));
        let b = line.heading_at((s + CURVATURE_WINDOW).min(len));
        straight.push(wrap_angle(b - a).abs() < STRAIGHT_TOLERANCE);
        junction.push(
            route
                .junctions
                .iter()
                .any(|j| s >= j.at - JUNCTION_BEFORE && s <= j.at + JUNCTION_AFTER),
        );
    }
    Ok(SegmentTags {
        straight,
        junction,
        length: len,
    })
}

fn candidates(route: &RouteSpec, tags: &SegmentTags, kind: ScenarioKind) -> Vec<f64> {
    match kind.situation() {
        Situation::Straight(layout) => {
            if layout.is_some_and(|l| l != route.layout) {
                return Vec::new();
            }
            let mut out = Vec::new();
            let mut s = STRAIGHT_BEFORE;
            while s <= tags.length - STRAIGHT_AFTER {
                if tags.straight_between(s - STRAIGHT_BEFORE, s + STRAIGHT_AFTER) {
                    out.push(s);
                }
                s += 1.0;
            }
            out
        }
        Situation::Junction(turn) => route.junctions.iter().filter(|j| j.turn == turn).map(|j| j.at).collect(),
        Situation::Turning => route
            .junctions
            .iter()
            .filter(|j| j.turn != Turn::Straight)
            .map(|j| j.at)
            .collect(),
    }
}

fn situation_name(kind: ScenarioKind) -> String {
    match kind.situation() {
        Situation::Straight(None) => "straight road".into(),
        Situation::Straight(Some(l)) => format!("straight {} road", serde_json::to_string(&l).unwrap().trim_matches('"')),
        Situation::Junction(t) => format!("junction with a {} turn", serde_json::to_string(&t).unwrap().trim_matches('"')),
        Situation::Turning => "turning junction".into(),
    }
}

/// Places one instance per requested kind on a compatible road segment,
/// keeping anchors at least [`MIN_SPACING`] apart. Parameters take their
/// defaults.
pub fn place_scenarios(route: &RouteSpec, kinds: &[ScenarioKind], rng: &mut impl Rng) -> Result<Vec<ScenarioInstance>> {
    route.validate()?;
    let tags = segment_tags(route)?;
    let mut placed: Vec<ScenarioInstance> = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let all = candidates(route, &tags, kind);
        if all.is_empty() {
            return Err(Error::Placement {
                kind: kind.to_string(),
                reason: format!("route {} has no {}", route.id, situation_name(kind)),
            });
        }
        let free: Vec<f64> = all
            .into_iter()
            .filter(|&s| placed.iter().all(|p| (p.anchor_distance - s).abs() >= MIN_SPACING))
            .collect();
        if free.is_empty() {
            return Err(Error::Placement {
                kind: kind.to_string(),
                reason: format!("minimum spacing of {MIN_SPACING} m cannot be met on route {}", route.id),
            });
        }
        let anchor = free[rng.gen_range(0..free.len())];
        placed.push(ScenarioInstance::new(kind, anchor));
    }
    Ok(placed)
}

/// Parameters drawn uniformly within each range of `kind`; paired min/max
/// ranges are drawn together and ordered.
pub fn randomize_params(kind: ScenarioKind, rng: &mut impl Rng) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in kind.params() {
        out.insert(r.name.to_string(), rng.gen_range(r.lo..=r.hi));
    }
    for (lo, hi) in [("flow-speed-min", "flow-speed-max"), ("flow-interval-min", "flow-interval-max")] {
        if let (Some(&a), Some(&b)) = (out.get(lo), out.get(hi)) {
            out.insert(lo.into(), a.min(b));
            out.insert(hi.into(), a.max(b));
        }
    }
    out
}
