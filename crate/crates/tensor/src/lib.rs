//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]; computations that need gradients are recorded
//! on a [`Tape`] through the operation methods defined on it (`matmul`,
//! `conv2d`, `batch_norm`, ...). Everything runs on the CPU in the calling
//! thread. Both `f32` and `f64` are supported; `f64` is used for gradient
//! verification.

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::activation::gelu_scalar;
pub use ops::conv::{conv2d_output_hw, window_out_len, Conv2dSpec};
pub use ops::norm::{BatchStats, BnBuffers, BnMode, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
