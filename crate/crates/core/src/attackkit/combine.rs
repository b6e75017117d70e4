use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{sign, Tensor};

use super::AttackError;

/// Rule turning per-task input gradients and losses into one raw direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Combiner {
    /// Gradient of a single task.
    Single(usize),
    /// Sum of all task gradients.
    Total,
    /// Sum of the signs of all task gradients.
    SignTotal,
    /// Sum of task gradients, each divided by its task loss.
    Dgba,
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combiner::Single(j) => write!(f, "Single({j})"),
            Combiner::Total => f.write_str("Total"),
            Combiner::SignTotal => f.write_str("SignTotal"),
            Combiner::Dgba => f.write_str("DGBA"),
        }
    }
}

impl FromStr for Combiner {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        match lower.as_str() {
            "total" => return Ok(Combiner::Total),
            "signtotal" | "sign-total" => return Ok(Combiner::SignTotal),
            "dgba" => return Ok(Combiner::Dgba),
            _ => {}
        }
        if let Some(inner) = lower.strip_prefix("single(").and_then(|r| r.strip_suffix(')')) {
            if let Ok(j) = inner.trim().parse() {
                return Ok(Combiner::Single(j));
            }
        }
        Err(AttackError::InvalidConfig(format!("unknown combiner `{t}`")))
    }
}

impl Serialize for Combiner {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Combiner {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Combiner {
    pub fn check_tasks(self, tasks: usize) -> Result<(), AttackError> {
        match self {
            Combiner::Single(j) if j >= tasks => Err(AttackError::UnknownTask { task: j, tasks }),
            _ => Ok(()),
        }
    }
}

fn check_inputs(grads: &[Tensor], losses: &[f64]) -> Result<(), AttackError> {
    let first = grads.first().ok_or(AttackError::NoTasks)?;
    if grads.len() != losses.len() {
        return Err(AttackError::InvalidConfig(format!("{} gradients but {} losses", grads.len(), losses.len())));
    }
    if let Some(g) = grads.iter().find(|g| g.shape() != first.shape()) {
        return Err(AttackError::ShapeMismatch { expected: first.shape().to_vec(), found: g.shape().to_vec() });
    }
    Ok(())
}

/// Raw (unsigned) direction of `combiner`. The drivers take its sign.
pub fn combine_gradients(combiner: Combiner, grads: &[Tensor], losses: &[f64]) -> Result<Tensor, AttackError> {
    check_inputs(grads, losses)?;
    combiner.check_tasks(grads.len())?;
    let mut out = Tensor::zeros(grads[0].shape());
    match combiner {
        Combiner::Single(j) => out = grads[j].clone(),
        Combiner::Total => grads.iter().for_each(|g| out.axpy(1.0, g)),
        Combiner::SignTotal => {
            for g in grads {
                for (o, v) in out.data_mut().iter_mut().zip(g.data()) {
                    *o += sign(*v);
                }
            }
        }
        Combiner::Dgba => {
            if let Some((task, &value)) = losses.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
                return Err(AttackError::NonPositiveLoss { task, value });
            }
            for (g, l) in grads.iter().zip(losses) {
                out.axpy(1.0 / l, g);
            }
        }
    }
    Ok(out)
}

/// `sign(combine_gradients(..))` with `sign(0) = 0`.
pub fn signed_direction(combiner: Combiner, grads: &[Tensor], losses: &[f64]) -> Result<Tensor, AttackError> {
    Ok(combine_gradients(combiner, grads, losses)?.map(sign))
}

/// ℓ∞ budget around the clean input intersected with the valid input range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Budget {
    /// Budget of radius `epsilon` on inputs in `[0, 1]`.
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, lower: 0.0, upper: 1.0 }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::InvalidConfig(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon)));
        }
        if !(self.lower < self.upper) {
            return Err(AttackError::InvalidConfig(format!("degenerate range [{}, {}]", self.lower, self.upper)));
        }
        Ok(())
    }

    /// Whether `x` lies in the ball around `origin` (with `slack`) and in range.
    pub fn contains(&self, x: &Tensor, origin: &Tensor, slack: f64) -> bool {
        x.data()
            .iter()
            .zip(origin.data())
            .all(|(&v, &o)| (v - o).abs() <= self.epsilon + slack && v >= self.lower && v <= self.upper)
    }
}

/// Componentwise clamp of `candidate` to `[origin − ε, origin + ε] ∩ [lower, upper]`.
pub fn project(candidate: &Tensor, origin: &Tensor, budget: &Budget) -> Tensor {
    assert_eq!(candidate.shape(), origin.shape(), "projection shape mismatch");
    let eps = budget.epsilon;
    candidate
        .zip_map(origin, |c, o| {
            let lo = (o - eps).max(budget.lower);
            let hi = (o + eps).min(budget.upper);
            c.max(lo).min(hi)
        })
        .expect("shapes checked")
}

/// Largest ratio of gradient norms over all task pairs; `+∞` when a gradient
/// is zero. Needs at least two tasks.
pub fn gradient_dominance_ratio(grads: &[Tensor]) -> Result<f64, AttackError> {
    if grads.len() < 2 {
        return Err(AttackError::InvalidConfig("dominance ratio needs at least two tasks".into()));
    }
    let norms: Vec<f64> = grads.iter().map(Tensor::l2_norm).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(if min == 0.0 { f64::INFINITY } else { max / min })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn single_task_dgba() {
        let g = [v(&[0.5, -2.0])];
        assert_eq!(combine_gradients(Combiner::Dgba, &g, &[2.0]).unwrap().data(), &[0.25, -1.0]);
        assert_eq!(signed_direction(Combiner::Dgba, &g, &[2.0]).unwrap(), signed_direction(Combiner::Single(0), &g, &[2.0]).unwrap());
        assert_eq!(signed_direction(Combiner::Dgba, &g, &[2.0]).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn two_task_examples() {
        let g = [v(&[2.0, -1.0]), v(&[-1.0, 3.0])];
        let l = [2.0, 1.0];
        assert_eq!(combine_gradients(Combiner::Dgba, &g, &l).unwrap().data(), &[0.0, 2.5]);
        assert_eq!(signed_direction(Combiner::Dgba, &g, &l).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(combine_gradients(Combiner::Total, &g, &l).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(signed_direction(Combiner::Total, &g, &l).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(combine_gradients(Combiner::SignTotal, &g, &l).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(combine_gradients(Combiner::Single(1), &g, &l).unwrap().data(), &[-1.0, 3.0]);
    }

    #[test]
    fn combiner_errors() {
        let g = [v(&[1.0]), v(&[1.0])];
        assert!(matches!(combine_gradients(Combiner::Dgba, &g, &[1.0, 0.0]), Err(AttackError::NonPositiveLoss { task: 1, .. })));
        assert!(matches!(combine_gradients(Combiner::Single(2), &g, &[1.0, 1.0]), Err(AttackError::UnknownTask { .. })));
        assert!(matches!(combine_gradients(Combiner::Total, &[], &[]), Err(AttackError::NoTasks)));
    }

    #[test]
    fn combiner_text_round_trip() {
        for c in [Combiner::Single(3), Combiner::Total, Combiner::SignTotal, Combiner::Dgba] {
            assert_eq!(c.to_string().parse::<Combiner>().unwrap(), c);
        }
        assert_eq!("single( 1 )".parse::<Combiner>().unwrap(), Combiner::Single(1));
        assert!("Single(x)".parse::<Combiner>().is_err());
    }

    #[test]
    fn projection_examples() {
        let b = Budget::new(0.1);
        assert!((project(&v(&[0.75]), &v(&[0.5]), &b).data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(project(&v(&[1.2]), &v(&[0.95]), &b).data(), &[1.0]);
        let inside = v(&[0.55, 0.45]);
        assert_eq!(project(&inside, &v(&[0.5, 0.5]), &b), inside);
    }

    #[test]
    fn dominance_examples() {
        assert_eq!(gradient_dominance_ratio(&[v(&[1.0, 2.0]), v(&[2.0, 1.0])]).unwrap(), 1.0);
        assert_eq!(gradient_dominance_ratio(&[v(&[3.0, 0.0]), v(&[0.0, 1.0])]).unwrap(), 3.0);
        assert_eq!(gradient_dominance_ratio(&[v(&[3.0]), v(&[0.0])]).unwrap(), f64::INFINITY);
        assert!(gradient_dominance_ratio(&[v(&[1.0])]).is_err());
    }
}
