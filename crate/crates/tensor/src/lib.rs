//! Minimal dense tensors and reverse-mode automatic differentiation.
//!
//! Everything runs in `f64` on the calling thread. [`Graph`] records a
//! forward pass and [`Graph::backward`] replays it; the same [`kernels`] back
//! the tape and the eager inference path so the two agree bit for bit.

mod error;
pub mod flops;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupReport, ParamGroup, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{AttentionLayout, Axis, RowMask, LAYER_NORM_EPS};
pub use tensor::Tensor;
