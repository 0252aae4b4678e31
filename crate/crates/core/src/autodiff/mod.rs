//! Dense tensors and reverse-mode differentiation with a double-backward
//! contract.

mod bicubic;
mod fd;
mod graph;
mod sparse;
mod tensor;

pub use bicubic::{bicubic_map, bicubic_upsample};
pub use fd::{finite_difference_oracle, max_relative_error};
pub use graph::{Graph, Op, Var};
pub use sparse::SparseMap;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node {index} is not part of this graph")]
    LeafNotInGraph { index: usize },
    #[error("operation '{op}' has no differentiation rule")]
    UnsupportedOp { op: &'static str },
    #[error("upsampling factor must be at least 1")]
    ZeroFactor,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite function value while probing coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },
}
