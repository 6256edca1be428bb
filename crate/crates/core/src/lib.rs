//! Desk-scale model-based driving agent: a 2D micro-simulator, scenario
//! generation, BEV observations, a categorical recurrent world model, an
//! actor-critic trained in imagination, replay, training orchestration and
//! driving metrics.

pub mod actions;
pub mod bev;
pub mod error;
pub mod geom;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod planner;
pub mod replay;
pub mod reward;
pub mod scenario;
pub mod sim;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
