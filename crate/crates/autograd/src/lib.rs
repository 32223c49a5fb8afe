//! Minimal reverse-mode automatic differentiation on dense CPU tensors.
//!
//! The op set is exactly what the slice-fusion networks need: strided
//! convolution-free U-Net pieces (stride-1 convolution, pooling, upsampling,
//! channel concat), normalisation layers, multi-head attention primitives
//! and the cross-entropy family of losses. Everything runs single-threaded and
//! deterministically; matrix products go through `matrixmultiply`.

mod error;
mod float;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{GraphError, Result};
pub use float::Float;
pub use graph::{bce, Gradients, Graph, Var, LOG_CLAMP};
pub use kernels::{gelu, sigmoid};
pub use tensor::Tensor;
