use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

use super::combine::{combine_gradients, Combiner};
use super::AttackError;

/// Largest dimensionality the exhaustive oracle accepts.
pub const MAX_ORACLE_DIM: usize = 12;

/// Every maximizer of the linearized objective over `{−1, 1}^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub value: f64,
    /// All optimal sign vectors, in enumeration order.
    pub optimal: Vec<Vec<f64>>,
}

/// `β · Σ_i g_i / L_i`, evaluated through the combined coefficient vector so
/// that sign vectors differing only on zero coefficients score identically.
pub fn linearized_objective(beta: &[f64], grads: &[Tensor], losses: &[f64]) -> Result<f64, AttackError> {
    let c = combine_gradients(Combiner::Dgba, grads, losses)?;
    if beta.len() != c.len() {
        return Err(AttackError::ShapeMismatch { expected: c.shape().to_vec(), found: vec![beta.len()] });
    }
    Ok(beta.iter().zip(c.data()).map(|(b, c)| b * c).sum())
}

/// Brute-force maximizer of the linearized objective over all `2^d` sign
/// vectors. Intended as a test oracle only.
pub fn linearized_objective_oracle(grads: &[Tensor], losses: &[f64]) -> Result<OracleSolution, AttackError> {
    let c = combine_gradients(Combiner::Dgba, grads, losses)?;
    let d = c.len();
    if d > MAX_ORACLE_DIM {
        return Err(AttackError::DimensionTooLarge { dim: d, max: MAX_ORACLE_DIM });
    }
    let mut best = f64::NEG_INFINITY;
    let mut optimal: Vec<Vec<f64>> = Vec::new();
    for mask in 0u32..(1 << d) {
        let beta: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let value: f64 = beta.iter().zip(c.data()).map(|(b, c)| b * c).sum();
        if value > best {
            best = value;
            optimal.clear();
            optimal.push(beta);
        } else if value == best {
            optimal.push(beta);
        }
    }
    Ok(OracleSolution { value: best, optimal })
}
