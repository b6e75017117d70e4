//! Attack-strength and model-quality summaries: ARA, ARP, relative loss
//! change and cross-task transferability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("expected {expected} entries, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("baseline accuracy of task {task} is zero")]
    ZeroBaseline { task: usize },
    #[error("before-value of metric `{metric}` on task {task} is zero")]
    ZeroBefore { task: usize, metric: String },
    #[error("snapshots differ in structure at task {task}: {detail}")]
    StructureMismatch { task: usize, detail: String },
    #[error("task {task} has no metrics")]
    EmptyTask { task: usize },
    #[error("initial loss of task {task} is {value}, must be positive")]
    NonPositiveLoss { task: usize, value: f64 },
    #[error("attacked task {task} has ARP {value}; transferability is undefined")]
    AttackFailed { task: usize, value: f64 },
    #[error("task {task} is out of range for {tasks} tasks")]
    UnknownTask { task: usize, tasks: usize },
    #[error("transferability needs at least two tasks")]
    TooFewTasks,
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// Which direction of a metric counts as better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    LowerBetter,
    HigherBetter,
}

impl Orientation {
    /// Exponent `s` of the ARP sign factor `(-1)^s`.
    pub fn exponent(self) -> u8 {
        match self {
            Orientation::LowerBetter => 0,
            Orientation::HigherBetter => 1,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Orientation::LowerBetter => 1.0,
            Orientation::HigherBetter => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::LowerBetter => Orientation::HigherBetter,
            Orientation::HigherBetter => Orientation::LowerBetter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub orientation: Orientation,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub metrics: Vec<MetricValue>,
}

/// Metric values for every task of a model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub tasks: Vec<TaskMetrics>,
}

impl MetricSnapshot {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for t in &self.tasks {
            if t.metrics.is_empty() {
                return Err(MetricsError::EmptyTask { task: t.task });
            }
            if t.metrics.iter().any(|m| !m.value.is_finite()) {
                return Err(MetricsError::NonFinite { what: "metric snapshot" });
            }
        }
        Ok(())
    }

    /// First metric value named `name` on `task`.
    pub fn value(&self, task: usize, name: &str) -> Option<f64> {
        self.tasks
            .iter()
            .find(|t| t.task == task)?
            .metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

/// Overall and per-task ARP, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArpReport {
    pub overall: f64,
    pub per_task: Vec<f64>,
}

/// Mean relative accuracy difference of a model against a baseline.
pub fn ara(model: &[f64], baseline: &[f64]) -> Result<f64, MetricsError> {
    if model.len() != baseline.len() {
        return Err(MetricsError::LengthMismatch { expected: baseline.len(), found: model.len() });
    }
    if model.is_empty() {
        return Err(MetricsError::LengthMismatch { expected: 1, found: 0 });
    }
    let mut total = 0.0;
    for (task, (&m, &b)) in model.iter().zip(baseline).enumerate() {
        if b == 0.0 {
            return Err(MetricsError::ZeroBaseline { task });
        }
        total += (m - b) / b;
    }
    Ok(total / model.len() as f64)
}

/// Orientation-corrected mean relative degradation from `before` to `after`.
/// Positive values mean the model got worse.
pub fn arp(before: &MetricSnapshot, after: &MetricSnapshot) -> Result<ArpReport, MetricsError> {
    if before.tasks.len() != after.tasks.len() {
        return Err(MetricsError::LengthMismatch { expected: before.tasks.len(), found: after.tasks.len() });
    }
    if before.tasks.is_empty() {
        return Err(MetricsError::LengthMismatch { expected: 1, found: 0 });
    }
    let mut per_task = Vec::with_capacity(before.tasks.len());
    for (b, a) in before.tasks.iter().zip(&after.tasks) {
        if b.task != a.task || b.metrics.len() != a.metrics.len() {
            return Err(MetricsError::StructureMismatch {
                task: b.task,
                detail: format!("task {} with {} metrics vs task {} with {}", b.task, b.metrics.len(), a.task, a.metrics.len()),
            });
        }
        if b.metrics.is_empty() {
            return Err(MetricsError::EmptyTask { task: b.task });
        }
        let mut sum = 0.0;
        for (mb, ma) in b.metrics.iter().zip(&a.metrics) {
            if mb.name != ma.name || mb.orientation != ma.orientation {
                return Err(MetricsError::StructureMismatch {
                    task: b.task,
                    detail: format!("metric `{}` vs `{}`", mb.name, ma.name),
                });
            }
            if mb.value == 0.0 {
                return Err(MetricsError::ZeroBefore { task: b.task, metric: mb.name.clone() });
            }
            sum += mb.orientation.sign() * (ma.value - mb.value) / mb.value;
        }
        per_task.push(sum / b.metrics.len() as f64 * 100.0);
    }
    let overall = per_task.iter().sum::<f64>() / per_task.len() as f64;
    if !overall.is_finite() {
        return Err(MetricsError::NonFinite { what: "ARP" });
    }
    Ok(ArpReport { overall, per_task })
}

fn check_losses(initial: &[f64], current: &[f64]) -> Result<(), MetricsError> {
    if initial.len() != current.len() {
        return Err(MetricsError::LengthMismatch { expected: initial.len(), found: current.len() });
    }
    if let Some((task, &value)) = initial.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(MetricsError::NonPositiveLoss { task, value });
    }
    Ok(())
}

/// `Σ_i (L_i − l_i) / l_i`, the objective maximized by the gradient-balancing
/// attack.
pub fn relative_loss_change(initial: &[f64], current: &[f64]) -> Result<f64, MetricsError> {
    check_losses(initial, current)?;
    Ok(initial.iter().zip(current).map(|(l, c)| (c - l) / l).sum())
}

/// [`relative_loss_change`] divided by the number of tasks, the form used in
/// reports.
pub fn mean_relative_loss_change(initial: &[f64], current: &[f64]) -> Result<f64, MetricsError> {
    let total = relative_loss_change(initial, current)?;
    Ok(if initial.is_empty() { 0.0 } else { total / initial.len() as f64 })
}

/// Degradation of the non-attacked tasks relative to the attacked one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityReport {
    pub attacked: usize,
    pub per_task_arp: Vec<f64>,
    /// Raw mean ratio; may exceed 1.
    pub value: f64,
}

impl TransferabilityReport {
    /// Value clamped to `[0, 1]` for summary tables.
    pub fn clamped(&self) -> f64 {
        self.value.clamp(0.0, 1.0)
    }
}

/// `(1/(n−1)) Σ_{j≠x} ARP_j / ARP_x` for a single-task attack on task `x`.
pub fn transferability(per_task_arp: &[f64], attacked: usize) -> Result<TransferabilityReport, MetricsError> {
    let n = per_task_arp.len();
    if attacked >= n {
        return Err(MetricsError::UnknownTask { task: attacked, tasks: n });
    }
    if n < 2 {
        return Err(MetricsError::TooFewTasks);
    }
    let own = per_task_arp[attacked];
    if !(own > 0.0) {
        return Err(MetricsError::AttackFailed { task: attacked, value: own });
    }
    let sum: f64 = per_task_arp.iter().enumerate().filter(|&(j, _)| j != attacked).map(|(_, v)| v / own).sum();
    Ok(TransferabilityReport { attacked, per_task_arp: per_task_arp.to_vec(), value: sum / (n - 1) as f64 })
}
