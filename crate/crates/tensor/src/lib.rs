//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The engine is a Wengert tape: every differentiable operation appends a
//! node holding its output value and whatever it needs for the backward
//! pass. [`Tape::backward`] walks the nodes in reverse once and produces
//! [`Gradients`], which can be folded into a [`ParamStore`] and consumed by
//! [`Adam`].
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and `f64` for finite-difference gradient checks.

mod adam;
mod error;
pub mod gradcheck;
mod ops;
mod param;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, WeightDecay};
pub use error::{Result, TensorError};
pub use ops::BatchNormMode;
pub use param::{Param, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
