//! Dense double-precision tensors and a small reverse-mode differentiation
//! core.
//!
//! A [`Record`] is an immutable, topologically ordered list of primitive
//! applications (affine maps, ReLU, row normalization and three loss
//! reductions). Forward evaluation produces an [`Evaluation`] holding every
//! node value, from which exact gradients of any scalar node with respect to
//! input or parameter leaves can be pulled. Records are `Send + Sync` and
//! every evaluation owns its scratch space, so one record can be shared by
//! many workers.

mod check;
mod record;
mod tensor;

pub use check::{finite_difference_check, relative_error, FdReport, RELATIVE_SCALE_FLOOR};
pub use record::{Evaluation, NodeId, Op, Record, RecordBuilder};
pub use tensor::{sign, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid tensor shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {}: expected {expected:?}, found {found:?}", fmt_node(node))]
    ShapeMismatch { node: Option<NodeId>, expected: Vec<usize>, found: Vec<usize> },
    #[error("node {node} feeds `{op}` with rank {found}, expected rank {expected}")]
    RankMismatch { node: NodeId, op: &'static str, expected: usize, found: usize },
    #[error("expected {expected} input tensors, got {found}")]
    FeedCount { expected: usize, found: usize },
    #[error("unknown node {node}")]
    UnknownNode { node: NodeId },
    #[error("node {node} is not scalar (shape {shape:?})")]
    NonScalarOutput { node: NodeId, shape: Vec<usize> },
    #[error("node {node} is a `{op}` node, gradients are only available for inputs and parameters")]
    NotALeaf { node: NodeId, op: &'static str },
    #[error("node {node}: label {value} is not a class index below {classes}")]
    InvalidLabel { node: NodeId, value: f64, classes: usize },
    #[error("finite-difference step must be positive and finite, got {h}")]
    InvalidStep { h: f64 },
    #[error("probe point lies within h={h} of a kink (residual {residual:e}); resample the point")]
    KinkProximity { residual: f64, h: f64 },
}

fn fmt_node(node: &Option<NodeId>) -> String {
    node.map_or_else(|| "<none>".to_string(), |n| n.to_string())
}
