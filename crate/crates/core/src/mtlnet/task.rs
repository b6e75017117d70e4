use serde::{Deserialize, Serialize};

use crate::metrics::Orientation;

use super::MtlError;

/// Output head of a task; the loss is implied by the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadKind {
    /// Softmax cross-entropy over `classes` logits.
    Classification { classes: usize },
    /// Mean absolute error over `outputs` values.
    Regression { outputs: usize },
    /// `1 − cos` between the normalized prediction and a unit label.
    UnitVector { outputs: usize },
}

impl HeadKind {
    /// Width of the head's output layer.
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification { classes } => classes,
            HeadKind::Regression { outputs } | HeadKind::UnitVector { outputs } => outputs,
        }
    }

    pub fn loss_name(self) -> &'static str {
        match self {
            HeadKind::Classification { .. } => "cross-entropy",
            HeadKind::Regression { .. } => "l1",
            HeadKind::UnitVector { .. } => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    MeanAbsoluteError,
    /// Mean angle between prediction and label, in radians.
    MeanAngularError,
    /// Fraction of rows whose angular error is at most `threshold` radians.
    WithinAngle { threshold: f64 },
}

impl MetricKind {
    pub fn orientation(self) -> Orientation {
        match self {
            MetricKind::Accuracy | MetricKind::WithinAngle { .. } => Orientation::HigherBetter,
            MetricKind::MeanAbsoluteError | MetricKind::MeanAngularError => Orientation::LowerBetter,
        }
    }

    fn fits(self, head: HeadKind) -> bool {
        matches!(
            (self, head),
            (MetricKind::Accuracy, HeadKind::Classification { .. })
                | (MetricKind::MeanAbsoluteError, HeadKind::Regression { .. })
                | (MetricKind::MeanAngularError | MetricKind::WithinAngle { .. }, HeadKind::UnitVector { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub name: String,
    pub kind: MetricKind,
}

impl MetricDef {
    pub fn orientation(&self) -> Orientation {
        self.kind.orientation()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub head: HeadKind,
    pub metrics: Vec<MetricDef>,
}

/// Angle threshold used by [`TaskSpec::unit_vector`], in radians (30°).
pub const DEFAULT_ANGLE_THRESHOLD: f64 = std::f64::consts::PI / 6.0;

impl TaskSpec {
    pub fn classification(id: usize, classes: usize) -> Self {
        Self {
            id,
            head: HeadKind::Classification { classes },
            metrics: vec![MetricDef { name: "accuracy".into(), kind: MetricKind::Accuracy }],
        }
    }

    pub fn regression(id: usize, outputs: usize) -> Self {
        Self {
            id,
            head: HeadKind::Regression { outputs },
            metrics: vec![MetricDef { name: "mean-abs-error".into(), kind: MetricKind::MeanAbsoluteError }],
        }
    }

    pub fn unit_vector(id: usize, outputs: usize, threshold: f64) -> Self {
        Self {
            id,
            head: HeadKind::UnitVector { outputs },
            metrics: vec![
                MetricDef { name: "mean-angle".into(), kind: MetricKind::MeanAngularError },
                MetricDef { name: "within-angle".into(), kind: MetricKind::WithinAngle { threshold } },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), MtlError> {
        let fail = |msg: String| Err(MtlError::InvalidTask { task: self.id, reason: msg });
        match self.head {
            HeadKind::Classification { classes } if classes < 2 => {
                return fail(format!("classification needs at least 2 classes, got {classes}"))
            }
            HeadKind::Regression { outputs: 0 } => return fail("regression needs at least one output".into()),
            HeadKind::UnitVector { outputs } if outputs < 2 => {
                return fail(format!("unit-vector head needs at least 2 outputs, got {outputs}"))
            }
            _ => {}
        }
        if self.metrics.is_empty() {
            return fail("at least one metric is required".into());
        }
        for m in &self.metrics {
            if !m.kind.fits(self.head) {
                return fail(format!("metric `{}` does not apply to a {} head", m.name, self.head.loss_name()));
            }
            if let MetricKind::WithinAngle { threshold } = m.kind {
                if !(threshold > 0.0 && threshold <= std::f64::consts::PI) {
                    return fail(format!("angle threshold {threshold} outside (0, π]"));
                }
            }
        }
        Ok(())
    }
}

/// Task list whose head kinds cycle classification, regression, unit-vector.
pub fn standard_tasks(n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|id| match id % 3 {
            0 => TaskSpec::classification(id, 4),
            1 => TaskSpec::regression(id, 3),
            _ => TaskSpec::unit_vector(id, 3, DEFAULT_ANGLE_THRESHOLD),
        })
        .collect()
}
