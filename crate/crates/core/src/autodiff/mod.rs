//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod check;
mod tape;
mod tensor;

pub use check::{central_differences, finite_difference_check, gradient_check};
pub use tape::{GradientMap, Tape, Var, SQUASH_FLOOR};
pub use tensor::Tensor;

pub(crate) use tape::{matvec_values, sigmoid_scalar};
