//! Tensors, reverse-mode differentiation and the layers built on them.

pub mod checkpoint;
pub mod conv;
pub mod dist;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use conv::ConvGeom;
pub use dist::BucketSpec;
pub use layers::{ConvBlock, DeconvBlock, GruCell, Linear, Mlp, Norm};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
