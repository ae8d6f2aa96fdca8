//! Dense `f64` tensors with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport};
pub use tape::{gelu_scalar, normal_cdf, softmax, Tape, Var, CHECK_FINITE_ENV};
pub use tensor::Tensor;
