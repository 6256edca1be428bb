//! The fixed table of 30 discrete driving actions.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sim::Control;

/// Index into [`ACTIONS`].
pub type ActionId = usize;

pub const NUM_ACTIONS: usize = 30;

/// `(throttle, brake, steer)` rows: full brake, throttle 0.7 with nine steer
/// values, throttle 0.3 with ten, throttle 0.3 hard left, then coasting with
/// nine steer values.
pub const ACTIONS: [Control; NUM_ACTIONS] = [
    Control::new(0.0, 1.0, 0.0),
    Control::new(0.7, 0.0, -0.5),
    Control::new(0.7, 0.0, -0.3),
    Control::new(0.7, 0.0, -0.2),
    Control::new(0.7, 0.0, -0.1),
    Control::new(0.7, 0.0, 0.0),
    Control::new(0.7, 0.0, 0.1),
    Control::new(0.7, 0.0, 0.2),
    Control::new(0.7, 0.0, 0.3),
    Control::new(0.7, 0.0, 0.5),
    Control::new(0.3, 0.0, -0.7),
    Control::new(0.3, 0.0, -0.5),
    Control::new(0.3, 0.0, -0.3),
    Control::new(0.3, 0.0, -0.2),
    Control::new(0.3, 0.0, -0.1),
    Control::new(0.3, 0.0, 0.0),
    Control::new(0.3, 0.0, 0.1),
    Control::new(0.3, 0.0, 0.2),
    Control::new(0.3, 0.0, 0.3),
    Control::new(0.3, 0.0, 0.5),
    Control::new(0.3, 0.0, 0.7),
    Control::new(0.0, 0.0, -1.0),
    Control::new(0.0, 0.0, -0.6),
    Control::new(0.0, 0.0, -0.3),
    Control::new(0.0, 0.0, -0.1),
    Control::new(0.0, 0.0, 0.0),
    Control::new(0.0, 0.0, 0.1),
    Control::new(0.0, 0.0, 0.3),
    Control::new(0.0, 0.0, 0.6),
    Control::new(0.0, 0.0, 1.0),
];

/// Full brake, no steer.
pub const BRAKE: ActionId = 0;
/// Throttle 0.7, straight.
pub const CRUISE: ActionId = 5;
/// Coast, straight.
pub const COAST: ActionId = 25;

pub fn control(a: ActionId) -> Result<Control> {
    ACTIONS
        .get(a)
        .copied()
        .ok_or_else(|| Error::Usage(format!("action {a} outside [0, {NUM_ACTIONS})")))
}

/// `[30, 3]` tensor of (throttle, brake, steer) rows.
pub fn table_tensor() -> Tensor<f32> {
    let data = ACTIONS
        .iter()
        .flat_map(|c| [c.throttle as f32, c.brake as f32, c.steer as f32])
        .collect();
    Tensor::new(&[NUM_ACTIONS, 3], data)
}

/// Checks a stored action table against the built-in one.
pub fn matches_table(t: &Tensor<f32>) -> bool {
    *t == table_tensor()
}
