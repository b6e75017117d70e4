use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::task::{standard_tasks, HeadKind, TaskSpec};
use super::MtlError;

/// Inputs in `[0, 1]` plus one label tensor per task: class indices of shape
/// `(rows)`, or real/unit vectors of shape `(rows, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<Tensor>,
}

const UNIT_TOLERANCE: f64 = 1e-9;

impl LabeledBatch {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    /// Rows `indices` of every tensor.
    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_rows(indices),
            labels: self.labels.iter().map(|l| l.select_rows(indices)).collect(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> LabeledBatch {
        LabeledBatch {
            x: self.x.slice_rows(start, end),
            labels: self.labels.iter().map(|l| l.slice_rows(start, end)).collect(),
        }
    }

    /// Same labels, different inputs.
    pub fn with_inputs(&self, x: Tensor) -> LabeledBatch {
        LabeledBatch { x, labels: self.labels.clone() }
    }

    /// Checks shapes, input range and label validity against `tasks`.
    pub fn validate(&self, tasks: &[TaskSpec]) -> Result<(), MtlError> {
        let rows = self.rows();
        if self.x.shape().len() != 2 {
            return Err(MtlError::BatchShape(format!("inputs must be a matrix, got {:?}", self.x.shape())));
        }
        if self.x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MtlError::BatchShape("inputs outside [0, 1]".into()));
        }
        if self.labels.len() != tasks.len() {
            return Err(MtlError::BatchShape(format!("{} label tensors for {} tasks", self.labels.len(), tasks.len())));
        }
        for (t, y) in tasks.iter().zip(&self.labels) {
            let bad = |msg: String| Err(MtlError::BatchShape(format!("task {}: {msg}", t.id)));
            match t.head {
                HeadKind::Classification { classes } => {
                    if y.shape() != [rows] {
                        return bad(format!("labels have shape {:?}, expected [{rows}]", y.shape()));
                    }
                    if y.data().iter().any(|&c| c.fract() != 0.0 || c < 0.0 || c >= classes as f64) {
                        return bad("class label out of range".into());
                    }
                }
                h => {
                    if y.shape() != [rows, h.outputs()] {
                        return bad(format!("labels have shape {:?}, expected [{rows}, {}]", y.shape(), h.outputs()));
                    }
                    if let HeadKind::UnitVector { .. } = h {
                        for r in 0..rows {
                            let n = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                            if (n - 1.0).abs() > UNIT_TOLERANCE {
                                return bad(format!("row {r} has norm {n}"));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic multi-task benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: Vec<TaskSpec>,
    pub input_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Weight of the shared latent block in every task's latent input.
    pub correlation: f64,
    /// Latent coordinates per block; the teacher has `(tasks + 1) · latent` of them.
    pub latent: usize,
    /// Input coordinates read by each latent coordinate; `input_dim` makes the
    /// projection dense.
    pub support: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn standard(tasks: usize, input_dim: usize, train_size: usize, test_size: usize, correlation: f64, seed: u64) -> Self {
        Self { tasks: standard_tasks(tasks), input_dim, train_size, test_size, correlation, latent: 8, support: input_dim, seed }
    }

    pub fn validate(&self) -> Result<(), MtlError> {
        let fail = |m: &str| Err(MtlError::InvalidConfig(m.to_string()));
        if self.input_dim < 4 {
            return fail("input dimension must be at least 4");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return fail("correlation must lie in [0, 1]");
        }
        if self.support == 0 || self.support > self.input_dim {
            return fail("support must lie in [1, input dimension]");
        }
        if self.tasks.is_empty() || self.train_size == 0 || self.test_size == 0 || self.latent == 0 {
            return fail("task count, split sizes and latent size must be positive");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(MtlError::InvalidConfig(format!("task at position {i} has id {}", t.id)));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticDataset, MtlError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let teacher = Teacher::sample(self, &mut rng);
        let train = teacher.sample_batch(self.train_size, &mut rng);
        let test = teacher.sample_batch(self.test_size, &mut rng);
        Ok(SyntheticDataset { tasks: self.tasks.clone(), teacher, train, test })
    }
}

/// Hidden labelling function. A shared latent block and one private block per
/// task are computed as `tanh(A (x − 0.5))`, where every column of `A` has
/// `support` nonzero entries; task `i` reads
/// `ρ · shared + (1 − ρ) · private_i` and applies its own random head.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    tasks: Vec<TaskSpec>,
    correlation: f64,
    latent: usize,
    input_dim: usize,
    /// `(input_dim, (tasks + 1) · latent)`.
    projection: Vec<f64>,
    heads: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Teacher {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (spec.tasks.len() + 1) * spec.latent;
        let a = Normal::new(0.0, (12.0 / spec.support as f64).sqrt()).expect("positive std");
        let mut projection = vec![0.0; spec.input_dim * hidden];
        for j in 0..hidden {
            for i in rand::seq::index::sample(rng, spec.input_dim, spec.support) {
                projection[i * hidden + j] = a.sample(rng);
            }
        }
        let v = Normal::new(0.0, (1.0 / spec.latent as f64).sqrt()).expect("positive std");
        let heads = spec
            .tasks
            .iter()
            .map(|t| {
                let m = t.head.outputs();
                let weights = (0..spec.latent * m).map(|_| v.sample(rng)).collect();
                let offset = match t.head {
                    HeadKind::UnitVector { .. } => (0..m).map(|_| v.sample(rng)).collect(),
                    _ => vec![0.0; m],
                };
                (weights, offset)
            })
            .collect();
        Self {
            tasks: spec.tasks.clone(),
            correlation: spec.correlation,
            latent: spec.latent,
            input_dim: spec.input_dim,
            projection,
            heads,
        }
    }

    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let width = (self.tasks.len() + 1) * self.latent;
        let mut h = vec![0.0; width];
        for (i, xi) in x.iter().enumerate() {
            let centered = xi - 0.5;
            for (hj, a) in h.iter_mut().zip(&self.projection[i * width..(i + 1) * width]) {
                *hj += centered * a;
            }
        }
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    /// Hidden coordinates read by `task` with their mixing weights; entries with
    /// zero weight are omitted.
    pub fn latent_support(&self, task: usize) -> Vec<(usize, f64)> {
        let rho = self.correlation;
        let shared = (0..self.latent).map(|j| (j, rho));
        let own = (0..self.latent).map(|j| ((task + 1) * self.latent + j, 1.0 - rho));
        shared.chain(own).filter(|&(_, w)| w != 0.0).collect()
    }

    /// Latent vector read by `task` from hidden state `h`.
    pub fn task_latent(&self, h: &[f64], task: usize) -> Vec<f64> {
        let rho = self.correlation;
        let own = &h[(task + 1) * self.latent..(task + 2) * self.latent];
        h[..self.latent].iter().zip(own).map(|(s, o)| rho * s + (1.0 - rho) * o).collect()
    }

    /// Label of every task for one input row.
    pub fn label(&self, x: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(x.len(), self.input_dim, "input width");
        let h = self.hidden(x);
        self.tasks
            .iter()
            .zip(&self.heads)
            .map(|(t, (w, c))| {
                let u = self.task_latent(&h, t.id);
                let m = t.head.outputs();
                let mut out: Vec<f64> =
                    (0..m).map(|j| c[j] + u.iter().enumerate().map(|(k, uk)| uk * w[k * m + j]).sum::<f64>()).collect();
                match t.head {
                    HeadKind::Classification { .. } => {
                        let best = out
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                            .0;
                        vec![best as f64]
                    }
                    HeadKind::Regression { .. } => out,
                    HeadKind::UnitVector { .. } => {
                        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > 0.0 {
                            out.iter_mut().for_each(|v| *v /= n);
                        } else {
                            out = vec![0.0; m];
                            out[0] = 1.0;
                        }
                        out
                    }
                }
            })
            .collect()
    }

    fn sample_batch(&self, rows: usize, rng: &mut ChaCha8Rng) -> LabeledBatch {
        let x: Vec<f64> = (0..rows * self.input_dim).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mut labels: Vec<Vec<f64>> = vec![Vec::new(); self.tasks.len()];
        for r in 0..rows {
            for (t, y) in self.label(&x[r * self.input_dim..(r + 1) * self.input_dim]).into_iter().enumerate() {
                labels[t].extend(y);
            }
        }
        let labels = self
            .tasks
            .iter()
            .zip(labels)
            .map(|(t, data)| match t.head {
                HeadKind::Classification { .. } => Tensor::vector(data),
                h => Tensor::matrix(rows, h.outputs(), data).expect("consistent dims"),
            })
            .collect();
        LabeledBatch { x: Tensor::matrix(rows, self.input_dim, x).expect("consistent dims"), labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub tasks: Vec<TaskSpec>,
    pub teacher: Teacher,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}
