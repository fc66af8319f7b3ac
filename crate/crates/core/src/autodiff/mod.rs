//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Complex quantities are carried as separate real and imaginary nodes
//! ([`CNode`]); every adjoint is computed on the real representation.

mod check;
mod complex;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckError};
pub use complex::CNode;
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: OpKind, shapes: Vec<Vec<usize>> },
    #[error("matrix of size {size} is singular")]
    Singular { size: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
