//! Minimal reverse-mode differentiation over dense tensors.
//!
//! The kernel supports exactly thirteen primitives (see [`Primitive`]). Model
//! code composes everything else, e.g. subtraction is `add(a, scale(b, -1))`
//! and per-row sums are a matmul against a column of ones.

mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport, KinkPolicy};
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Gradients, Graph, NodeId, PrimKind, Primitive};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch {dims:?}")]
    Shape { op: &'static str, dims: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("gather_rows: index {index} out of range for table of {rows} rows")]
    GatherIndex { index: usize, rows: usize },
    #[error("{op}: input {value} outside domain")]
    Domain { op: &'static str, value: f64 },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("tensor: {len} values do not fill shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("grad check: non-finite evaluation")]
    NonFinite,
    #[error("grad check: probe crosses a relu kink")]
    NonSmooth,
    #[error("grad check: step must be positive")]
    BadStep,
}
