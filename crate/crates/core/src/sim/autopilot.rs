//! Rule-based driver: pure-pursuit steering along the reference path and
//! hazard-aware speed keeping, snapped to the discrete action table.

use super::World;
use crate::actions::{ActionId, ACTIONS, BRAKE};
use crate::reward::desired_speed;

/// Speed band around the desired speed inside which the light throttle row
/// is used.
const SPEED_BAND: f64 = 0.5;
const CURVE_LOOK: f64 = 15.0;
const CURVE_SPEED: f64 = 5.0;

/// Steering fraction that points the ego at a look-ahead point on the
/// reference path.
pub fn pursuit_steer(world: &World) -> f64 {
    let ego = world.ego();
    let (s, _) = world.route_progress();
    let look = (1.5 * ego.speed).max(4.0);
    let target = world.reference_path().point_at(s + look);
    let rel = target - ego.pos();
    let alpha = crate::geom::wrap_angle(rel.heading() - ego.heading);
    let p = &world.config().vehicle;
    let curvature = 2.0 * alpha.sin() / rel.norm().max(1e-6);
    ((curvature * p.wheelbase).atan() / p.delta_max).clamp(-1.0, 1.0)
}

/// Speed cap from the heading change over the next stretch of path.
fn curve_speed(world: &World) -> f64 {
    let (s, _) = world.route_progress();
    let path = world.reference_path();
    let turn = crate::geom::wrap_angle(path.heading_at(s + CURVE_LOOK) - path.heading_at(s)).abs();
    if turn > 0.3 {
        CURVE_SPEED
    } else {
        f64::INFINITY
    }
}

/// Action of the rule-based driver for the current state.
pub fn autopilot_action(world: &World) -> ActionId {
    let v = world.ego().speed;
    let v_des = desired_speed(&world.hazards(), world.reward_config()).min(curve_speed(world));
    let throttle = if v_des < 0.5 || v > v_des + 2.0 {
        return BRAKE;
    } else if v < v_des - SPEED_BAND {
        0.7
    } else if v > v_des + SPEED_BAND {
        0.0
    } else {
        0.3
    };
    let steer = pursuit_steer(world);
    // the strong throttle row cannot steer beyond 0.5
    let throttle = if throttle == 0.7 && steer.abs() > 0.5 { 0.3 } else { throttle };
    (0..ACTIONS.len())
        .filter(|&a| ACTIONS[a].throttle == throttle && ACTIONS[a].brake == 0.0)
        .min_by(|&a, &b| (ACTIONS[a].steer - steer).abs().total_cmp(&(ACTIONS[b].steer - steer).abs()))
        .unwrap_or(BRAKE)
}
