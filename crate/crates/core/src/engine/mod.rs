//! Reverse-mode automatic differentiation over dense tensors.
//!
//! [`Graph::backward`] computes numeric gradients; [`Graph::grad_as_graph`]
//! records the same gradients as differentiable nodes so that saliency maps
//! can appear inside a training objective.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{GradMap, Graph, Node, NodeId, Op};
pub use optim::{finite_diff_check, Sgd};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}: input outside the primitive's domain")]
    Domain(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} has no graph-expressible backward rule")]
    NoGraphRule(&'static str),
    #[error("node {0} is not a member of this graph")]
    UnknownNode(usize),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("{0}")]
    Invalid(String),
}
