//! Minimal CPU tensor library with reverse-mode autodiff.
//!
//! Scope is deliberately narrow: the dense ops a convolutional embedding
//! network needs, a [`Backward`] extension point for fused custom kernels,
//! and a finite-difference checker.

pub mod error;
pub mod gradcheck;
mod mat;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use mat::{gemm_view, MatMut, MatRef};
pub use scalar::Scalar;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{gemm, Tensor};
