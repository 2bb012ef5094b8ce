//! Dense tensors, reverse-mode autodiff and Adam.

mod adam;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use ops::{l2_distance, logsumexp, matmul};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}
