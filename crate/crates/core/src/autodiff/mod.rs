//! Tape-based reverse-mode differentiation over `f64` tensors.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, grad_check_with, Coordinate, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{Graph, Var};
pub(crate) use graph::{gelu_scalar, sigmoid_scalar};
pub use tensor::Tensor;
