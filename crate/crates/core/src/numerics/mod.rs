//! Dense 64-bit tensors, reverse-mode differentiation, and gradient checking.
//!
//! Everything downstream (attention, pooling, the backbone, training) is
//! composed from the kernels here. Training and checks run in f64; 32-bit
//! precision exists only at file boundaries (see [`Tensor::to_f32_precision`]).

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamReport, EXHAUSTIVE_LIMIT, MIN_PROJECTIONS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product, eager form.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernels::matmul(a, b)
}

/// Stable softmax over a declared axis set (max-subtracted unconditionally).
pub fn stable_softmax(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    kernels::softmax_axes(x, axes)
}

/// Elementwise hyperbolic tangent, eager form.
pub fn tanh_map(x: &Tensor) -> Result<Tensor> {
    kernels::tanh_map(x)
}
