//! Central-difference verification of reverse-mode gradients.

use super::record::{NodeId, Op, Record};
use super::tensor::Tensor;
use super::DiffError;

/// Components whose magnitude is below this fraction of the largest gradient
/// component are compared against that floor instead of their own magnitude.
pub const RELATIVE_SCALE_FLOOR: f64 = 1e-2;

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Reverse-mode gradients, one per requested leaf.
    pub analytic: Vec<Tensor>,
    /// Central-difference estimates, same layout as `analytic`.
    pub numeric: Vec<Tensor>,
    /// Per-component relative error, same layout as `analytic`.
    pub relative_errors: Vec<Vec<f64>>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric derivative. `scale` is the
/// largest analytic magnitude over the compared tensor; differences at or below
/// `noise` count as agreement.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64, noise: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= noise {
        return 0.0;
    }
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_SCALE_FLOOR * scale);
    if denom == 0.0 {
        f64::INFINITY
    } else {
        diff / denom
    }
}

/// Compares `grad(output, wrt)` against `(f(v + h) - f(v - h)) / 2h` for every
/// component of every `wrt` leaf.
///
/// The probe point is rejected with [`DiffError::KinkProximity`] when any
/// nonzero ReLU input or L1 residual lies within `h` of zero, or when a probe
/// flips the sign of any such residual.
pub fn finite_difference_check(
    record: &Record,
    feeds: &[Tensor],
    output: NodeId,
    wrt: &[NodeId],
    h: f64,
    tol: f64,
) -> Result<FdReport, DiffError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(DiffError::InvalidStep { h });
    }
    let base = record.forward(feeds)?;
    // central differences cannot resolve slopes below the rounding error of f
    let noise = f64::EPSILON * base.scalar(output).abs() / h;
    let pattern: Vec<bool> = base.kink_residuals().iter().map(|&r| r > 0.0).collect();
    // exact zeros are usually dead units that stay put; a probe that moves one off
    // zero flips the pattern and is rejected below
    if let Some(r) = base.kink_residuals().iter().find(|r| **r != 0.0 && r.abs() <= h) {
        return Err(DiffError::KinkProximity { residual: *r, h });
    }
    let analytic = base.grad(output, wrt)?;
    drop(base);

    let mut probe_record = record.clone();
    let mut probe_feeds = feeds.to_vec();
    let mut numeric = Vec::with_capacity(wrt.len());

    for (&leaf, grad) in wrt.iter().zip(&analytic) {
        let feed_slot = record.inputs().iter().position(|&i| i == leaf);
        let mut est = vec![0.0; grad.len()];
        for (k, slot) in est.iter_mut().enumerate() {
            let mut eval_at = |delta: f64| -> Result<f64, DiffError> {
                match feed_slot {
                    Some(s) => {
                        let orig = feeds[s].data()[k];
                        probe_feeds[s].data_mut()[k] = orig + delta;
                        let out = evaluate_probe(record, &probe_feeds, output, &pattern, h);
                        probe_feeds[s].data_mut()[k] = orig;
                        out
                    }
                    None => {
                        let orig = record.param_value(leaf).expect("leaf is a param").data()[k];
                        probe_record.param_mut(leaf).expect("leaf is a param").data_mut()[k] = orig + delta;
                        let out = evaluate_probe(&probe_record, feeds, output, &pattern, h);
                        probe_record.param_mut(leaf).expect("leaf is a param").data_mut()[k] = orig;
                        out
                    }
                }
            };
            let plus = eval_at(h)?;
            let minus = eval_at(-h)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(grad.shape().to_vec(), est).expect("same shape"));
    }

    let mut max_err: f64 = 0.0;
    let relative_errors: Vec<Vec<f64>> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a.linf_norm();
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| {
                    let e = relative_error(x, y, scale, noise);
                    max_err = max_err.max(e);
                    e
                })
                .collect()
        })
        .collect();

    Ok(FdReport {
        analytic,
        numeric,
        relative_errors,
        max_relative_error: max_err,
        tolerance: tol,
        passed: max_err <= tol,
    })
}

fn evaluate_probe(
    record: &Record,
    feeds: &[Tensor],
    output: NodeId,
    pattern: &[bool],
    h: f64,
) -> Result<f64, DiffError> {
    let eval = record.forward(feeds)?;
    let residuals = eval.kink_residuals();
    if let Some((r, _)) = residuals.iter().zip(pattern).find(|(r, &p)| (**r > 0.0) != p) {
        return Err(DiffError::KinkProximity { residual: *r, h });
    }
    Ok(eval.scalar(output))
}

impl Record {
    pub(crate) fn param_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        match self.op_mut(id)? {
            Op::Param(t) => Some(t),
            _ => None,
        }
    }
}
