//! Deterministic 2D driving micro-simulator: kinematic ego vehicle, scripted
//! actors, traffic controls, infraction detection and episode termination.

mod actors;
mod autopilot;
mod vehicle;
mod world;

pub use autopilot::{autopilot_action, pursuit_steer};
pub use actors::{following_limit, ActorKind, Blocker, BrakePhase, FlowSource, Mover, Npc, Script};
pub use vehicle::{kinematic_step, Control, Pose, VehicleParams};
pub use world::{
    create_world, discs_overlap, Band, DoneReason, InfractionEvent, InfractionKind, LightState, Marking, MarkingKind,
    RoadLayout, SimConfig, StepResult, TrafficControl, World, EGO_RADIUS,
};
