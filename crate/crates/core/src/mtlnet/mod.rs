//! Branched multi-task models: layouts, task heads and losses, a synthetic
//! teacher-labelled benchmark and a plain trainer.

mod checkpoint;
mod data;
mod layout;
mod model;
mod task;
mod train;

pub use checkpoint::{DatasetEnvelope, ModelCheckpoint, DATASET_FORMAT, ENVELOPE_VERSION, MODEL_FORMAT};
pub use data::{LabeledBatch, SyntheticDataset, SyntheticSpec, Teacher};
pub use layout::{Layout, LayoutParseError, LayoutViolation};
pub use model::{Block, BranchedModel, Head, ModelGraph, LOSS_FLOOR};
pub use task::{standard_tasks, HeadKind, MetricDef, MetricKind, TaskSpec, DEFAULT_ANGLE_THRESHOLD};
pub use train::{epoch_batches, evaluate_metrics, sgd_step, total_loss, train, TrainConfig};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MtlError {
    #[error("invalid layout: {0}")]
    InvalidLayout(#[from] LayoutViolation),
    #[error("task {task}: {reason}")]
    InvalidTask { task: usize, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("batch does not match the model: {0}")]
    BatchShape(String),
    #[error("training diverged in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
