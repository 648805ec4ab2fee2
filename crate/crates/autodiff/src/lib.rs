//! Minimal dense tensor library with reverse-mode automatic differentiation,
//! sized for training small 2D encoder-decoder CNNs on a CPU.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Activation, BatchStats, Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use real::Real;
pub use tensor::Tensor;
