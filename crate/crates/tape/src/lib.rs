//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is a 2-D [`Tensor`]; parameters live in a [`ParamStore`] and
//! are pulled onto a [`Tape`] per forward pass. The element type is any
//! [`Scalar`] (`f32` for training speed, `f64` for gradient checks).

pub mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, AttnSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
