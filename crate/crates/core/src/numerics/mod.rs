//! Dense tensors, a reverse-mode autodiff graph, and a finite-difference
//! gradient oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    compare_gradients, finite_difference_gradient, gradient_check, gradient_check_extended, gradient_check_many,
    relative_error, CoordinateCheck, Extended, GradCheckOptions, GradCheckReport, Objective,
};
pub use graph::{Gradients, Graph, NodeId, PairRotation, Unary};
pub use tensor::{softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("empty axis")]
    EmptyAxis,
    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
