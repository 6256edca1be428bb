use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Vec2};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`, counter-clockwise from the x axis.
    pub heading: f64,
    /// Meters per second, never negative.
    pub speed: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_heading(self.heading)
    }
}

/// Throttle and brake in `[0, 1]`, steer in `[-1, 1]` with positive values
/// turning left.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub throttle: f64,
    pub steer: f64,
    pub brake: f64,
}

impl Control {
    pub const fn new(throttle: f64, brake: f64, steer: f64) -> Self {
        Self { throttle, steer, brake }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.throttle) && (0.0..=1.0).contains(&self.brake) && (-1.0..=1.0).contains(&self.steer)
    }
}

/// Kinematic bicycle parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub a_max: f64,
    pub b_max: f64,
    /// Steering angle at full lock, radians.
    pub delta_max: f64,
    pub v_max: f64,
    pub drag: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.8,
            a_max: 3.0,
            b_max: 8.0,
            delta_max: 35f64.to_radians(),
            v_max: 20.0,
            drag: 0.05,
        }
    }
}

impl VehicleParams {
    /// Turning radius at constant steer fraction `steer`.
    pub fn turn_radius(&self, steer: f64) -> f64 {
        self.wheelbase / (steer * self.delta_max).tan().abs()
    }
}

/// Advances a pose by one step. Speed is integrated first; the new speed
/// drives the yaw rate, and the position moves along the mean heading of the
/// step.
pub fn kinematic_step(pose: Pose, control: Control, dt: f64, p: &VehicleParams) -> Pose {
    let accel = p.a_max * control.throttle - p.b_max * control.brake - p.drag * pose.speed;
    let speed = (pose.speed + accel * dt).clamp(0.0, p.v_max);
    let yaw_rate = if control.steer == 0.0 {
        0.0
    } else {
        speed / p.wheelbase * (control.steer * p.delta_max).tan()
    };
    let heading = pose.heading + yaw_rate * dt;
    if speed == 0.0 {
        return Pose { speed, ..pose };
    }
    let mid = if yaw_rate == 0.0 { pose.heading } else { 0.5 * (pose.heading + heading) };
    Pose {
        x: pose.x + speed * dt * mid.cos(),
        y: pose.y + speed * dt * mid.sin(),
        heading: wrap_angle(heading),
        speed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_steer_keeps_heading() {
        let p = VehicleParams::default();
        let mut pose = Pose::new(0.0, 0.0, 0.7, 3.0);
        for _ in 0..50 {
            pose = kinematic_step(pose, Control::new(0.7, 0.0, 0.0), 0.1, &p);
            assert_eq!(pose.heading, 0.7);
        }
    }

    #[test]
    fn rest_state_is_fixed_point() {
        let p = VehicleParams::default();
        let pose = Pose::new(1.0, 2.0, -0.3, 0.0);
        assert_eq!(kinematic_step(pose, Control::new(0.0, 0.0, 0.0), 0.1, &p), pose);
        assert_eq!(kinematic_step(pose, Control::new(0.0, 1.0, 0.0), 0.1, &p), pose);
    }

    proptest! {
        #[test]
        fn speed_stays_in_bounds(
            speed in 0.0f64..20.0,
            t in 0.0f64..=1.0, b in 0.0f64..=1.0, s in -1.0f64..=1.0, dt in 0.01f64..0.5,
        ) {
            let p = VehicleParams::default();
            let out = kinematic_step(Pose::new(0.0, 0.0, 0.0, speed), Control::new(t, b, s), dt, &p);
            prop_assert!(out.speed >= 0.0 && out.speed <= p.v_max);
            prop_assert!(out.heading > -std::f64::consts::PI && out.heading <= std::f64::consts::PI);
        }
    }
}
