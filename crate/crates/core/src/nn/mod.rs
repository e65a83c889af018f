//! Tensors, a gradient tape and the layer primitives the two classifiers use.
//!
//! Every forward operation records a node on a [`Tape`]; [`Tape::backward`]
//! replays the nodes in reverse and returns one gradient per trainable
//! parameter of a [`ParamStore`]. All arithmetic is generic over [`Real`], so
//! the same code runs in `f32` for training and `f64` for gradient checks.

mod conv;
pub mod gradcheck;
mod layers;
mod mbconv;
mod norm;
mod params;
mod real;
mod tape;
mod tensor;

pub use conv::{Conv, ConvSpec};
pub use layers::{ActKind, BatchNorm, Dense, PoolKind, SqueezeExcitation};
pub use mbconv::{MbConv, MbConvSpec};
pub use norm::{BN_EPS, BN_MOMENTUM};
pub use params::{Init, ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
