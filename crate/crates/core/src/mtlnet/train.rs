use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{MetricSnapshot, MetricValue, TaskMetrics};

use super::data::LabeledBatch;
use super::model::BranchedModel;
use super::task::{HeadKind, MetricKind};
use super::MtlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MtlError> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(MtlError::InvalidConfig(format!(
                "training needs positive epochs and batch size and a finite lr ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffled minibatch order for one epoch.
pub fn epoch_batches(rows: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One gradient step on the summed task losses of `batch`. Returns the floored
/// task losses measured before the step.
pub fn sgd_step(model: &mut BranchedModel, batch: &LabeledBatch, lr: f64) -> Result<Vec<f64>, MtlError> {
    let (losses, grads) = model.parameter_gradients(batch)?;
    if losses.iter().any(|l| !l.is_finite()) || grads.iter().any(|g| !g.all_finite()) {
        return Err(MtlError::Divergence { epoch: 0 });
    }
    if lr != 0.0 {
        for (p, g) in model.parameters_mut().into_iter().zip(&grads) {
            p.axpy(-lr, g);
        }
    }
    Ok(losses)
}

/// Sum of floored task losses over `batch`.
pub fn total_loss(model: &BranchedModel, batch: &LabeledBatch) -> Result<f64, MtlError> {
    Ok(model.task_losses(batch)?.iter().sum())
}

/// Mini-batch gradient descent with uniform task weights. Returns the total
/// training loss after every epoch. Divergence reports the 1-based epoch.
pub fn train(model: &mut BranchedModel, data: &LabeledBatch, config: &TrainConfig) -> Result<Vec<f64>, MtlError> {
    config.validate()?;
    data.validate(model.tasks())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        for idx in epoch_batches(data.rows(), config.batch_size, &mut rng) {
            sgd_step(model, &data.select(&idx), config.lr).map_err(|e| match e {
                MtlError::Divergence { .. } => MtlError::Divergence { epoch },
                other => other,
            })?;
        }
        let loss = total_loss(model, data)?;
        if !loss.is_finite() || model.parameters().iter().any(|p| !p.all_finite()) {
            return Err(MtlError::Divergence { epoch });
        }
        trace.push(loss);
    }
    Ok(trace)
}

fn angle(p: &[f64], y: &[f64]) -> f64 {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pn == 0.0 || yn == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let cos = p.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (pn * yn);
    cos.clamp(-1.0, 1.0).acos()
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc }).0
}

/// Metric values for every task of `model` on `batch`, in task order.
pub fn evaluate_metrics(model: &BranchedModel, batch: &LabeledBatch) -> Result<MetricSnapshot, MtlError> {
    let preds = model.predict(&batch.x)?;
    if batch.labels.len() != model.task_count() {
        return Err(MtlError::BatchShape(format!(
            "{} label tensors for {} tasks",
            batch.labels.len(),
            model.task_count()
        )));
    }
    let rows = batch.rows() as f64;
    let mut tasks = Vec::with_capacity(model.task_count());
    for ((t, p), y) in model.tasks().iter().zip(&preds).zip(&batch.labels) {
        let angles: Vec<f64> = match t.head {
            HeadKind::UnitVector { .. } => (0..batch.rows()).map(|r| angle(p.row(r), y.row(r))).collect(),
            _ => Vec::new(),
        };
        let metrics = t
            .metrics
            .iter()
            .map(|m| {
                let value = match m.kind {
                    MetricKind::Accuracy => {
                        (0..batch.rows()).filter(|&r| argmax(p.row(r)) as f64 == y.data()[r]).count() as f64 / rows
                    }
                    MetricKind::MeanAbsoluteError => {
                        p.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
                    }
                    MetricKind::MeanAngularError => angles.iter().sum::<f64>() / rows,
                    MetricKind::WithinAngle { threshold } => {
                        angles.iter().filter(|&&a| a <= threshold).count() as f64 / rows
                    }
                };
                MetricValue { name: m.name.clone(), orientation: m.orientation(), value }
            })
            .collect();
        tasks.push(TaskMetrics { task: t.id, metrics });
    }
    Ok(MetricSnapshot { tasks })
}
