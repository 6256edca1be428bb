//! Per-tick reward shaping: speed tracking, travel, lane deviation and
//! steering smoothness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Something the ego should slow down for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HazardKind {
    Vehicle,
    Pedestrian,
    Bicycle,
    Emergency,
    Obstacle,
    /// Stop line of a light showing yellow or red.
    TrafficLight,
    /// Stop line of a stop sign the ego has not yet stopped for.
    StopSign,
}

impl HazardKind {
    pub const ALL: [HazardKind; 7] = [
        HazardKind::Vehicle,
        HazardKind::Pedestrian,
        HazardKind::Bicycle,
        HazardKind::Emergency,
        HazardKind::Obstacle,
        HazardKind::TrafficLight,
        HazardKind::StopSign,
    ];
}

/// A hazard ahead with the free distance to it along the route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hazard {
    pub kind: HazardKind,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha_travel: f64,
    pub alpha_deviation: f64,
    pub alpha_steer: f64,
    pub d_max: f64,
    pub v_target: f64,
    /// Gap at which the desired speed starts dropping, per hazard kind.
    pub safe_distance: BTreeMap<HazardKind, f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let safe_distance = [
            (HazardKind::Vehicle, 12.0),
            (HazardKind::Pedestrian, 12.0),
            (HazardKind::Bicycle, 12.0),
            (HazardKind::Emergency, 12.0),
            (HazardKind::Obstacle, 12.0),
            (HazardKind::TrafficLight, 8.0),
            (HazardKind::StopSign, 6.0),
        ]
        .into_iter()
        .collect();
        Self {
            alpha_travel: 1.0,
            alpha_deviation: 0.5,
            alpha_steer: 0.3,
            d_max: 2.0,
            v_target: 8.0,
            safe_distance,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = [self.alpha_travel, self.alpha_deviation, self.alpha_steer].iter().all(|a| *a >= 0.0)
            && self.d_max > 0.0
            && self.v_target > 0.0
            && self.safe_distance.values().all(|d| *d > 0.0);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Validation(
                "reward weights must be non-negative, d-max, v-target and safe distances positive".into(),
            ))
        }
    }

    pub fn safe(&self, kind: HazardKind) -> f64 {
        self.safe_distance.get(&kind).copied().unwrap_or(12.0)
    }
}

/// Raw reward terms of one tick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RewardTerms {
    pub r_speed: f64,
    pub r_travel: f64,
    pub p_deviation: f64,
    pub c_steer: f64,
}

/// Target speed scaled linearly towards zero as the most constraining
/// hazard gets within its safe distance.
pub fn desired_speed(hazards: &[Hazard], cfg: &RewardConfig) -> f64 {
    let factor = hazards
        .iter()
        .map(|h| (h.gap / cfg.safe(h.kind)).clamp(0.0, 1.0))
        .fold(1.0, f64::min);
    cfg.v_target * factor
}

/// `1 - |speed - v_des| / v_target`, clamped to `[-1, 1]`.
pub fn speed_reward(speed: f64, hazards: &[Hazard], cfg: &RewardConfig) -> f64 {
    let v_des = desired_speed(hazards, cfg);
    (1.0 - (speed - v_des).abs() / cfg.v_target).clamp(-1.0, 1.0)
}

pub fn travel_reward(progress_delta: f64) -> f64 {
    progress_delta.max(0.0)
}

pub fn deviation_penalty(lateral_offset: f64, d_max: f64) -> f64 {
    -lateral_offset.abs().min(d_max) / d_max
}

pub fn steering_cost(steer: f64, steer_prev: f64) -> f64 {
    -(steer - steer_prev).abs()
}

pub fn total_reward(t: &RewardTerms, cfg: &RewardConfig) -> f64 {
    t.r_speed + cfg.alpha_travel * t.r_travel + cfg.alpha_deviation * t.p_deviation + cfg.alpha_steer * t.c_steer
}
