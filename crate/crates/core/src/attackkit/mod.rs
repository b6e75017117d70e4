//! Multi-task ℓ∞ attacks: gradient combiners, projection, the FGSM / PGD /
//! APGD drivers, a brute-force linearized-objective oracle and gradient
//! diagnostics.

mod combine;
mod drivers;
mod oracle;

pub use combine::{combine_gradients, gradient_dominance_ratio, project, signed_direction, Budget, Combiner};
pub use drivers::{
    apgd_attack, attack, attack_in_chunks, attack_objective, checkpoint_schedule, fgsm_attack, perturbation_alignment, pgd_attack,
    ChunkedAttack, ModelObjective, MultiTaskObjective,
};
pub use oracle::{linearized_objective, linearized_objective_oracle, OracleSolution, MAX_ORACLE_DIM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::mtlnet::MtlError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("combiner refers to task {task}, model has {tasks}")]
    UnknownTask { task: usize, tasks: usize },
    #[error("loss of task {task} is {value}; the loss floor must keep it positive")]
    NonPositiveLoss { task: usize, value: f64 },
    #[error("no task gradients given")]
    NoTasks,
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("dimension {dim} exceeds the exhaustive-search limit {max}")]
    DimensionTooLarge { dim: usize, max: usize },
    #[error(transparent)]
    Model(#[from] MtlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Driver {
    Fgsm,
    Pgd,
    Apgd,
}

impl std::fmt::Display for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Driver::Fgsm => "FGSM",
            Driver::Pgd => "PGD",
            Driver::Apgd => "APGD",
        })
    }
}

impl std::str::FromStr for Driver {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FGSM" => Ok(Driver::Fgsm),
            "PGD" => Ok(Driver::Pgd),
            "APGD" => Ok(Driver::Apgd),
            _ => Err(AttackError::InvalidConfig(format!("unknown driver `{s}`"))),
        }
    }
}

/// Stop a PGD run `extra_steps` after the mean relative loss change first
/// exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub threshold: f64,
    pub extra_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub driver: Driver,
    pub combiner: Combiner,
    pub budget: Budget,
    pub steps: usize,
    /// Initial step size η₀ in input units.
    pub step_size: f64,
    /// APGD momentum weight α.
    pub momentum: f64,
    /// APGD checkpoint iterations.
    pub checkpoints: Vec<usize>,
    /// PGD uniform random start inside the budget.
    pub random_start: bool,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
    /// Keep every iterate in the trace.
    pub record_iterates: bool,
}

pub const PGD_STEPS: usize = 20;
pub const APGD_STEPS: usize = 20;
pub const APGD_MOMENTUM: f64 = 0.75;

impl AttackConfig {
    /// Single step of size ε.
    pub fn fgsm(combiner: Combiner, epsilon: f64) -> Self {
        Self {
            driver: Driver::Fgsm,
            combiner,
            budget: Budget::new(epsilon),
            steps: 1,
            step_size: epsilon,
            momentum: 1.0,
            checkpoints: Vec::new(),
            random_start: false,
            early_stop: None,
            seed: 0,
            record_iterates: false,
        }
    }

    /// 20 steps of size ε/4 without random start.
    pub fn pgd(combiner: Combiner, epsilon: f64) -> Self {
        Self { driver: Driver::Pgd, steps: PGD_STEPS, step_size: epsilon / 4.0, ..Self::fgsm(combiner, epsilon) }
    }

    /// 20 iterations starting at η₀ = 2ε with α = 0.75 and the standard
    /// checkpoint schedule.
    pub fn apgd(combiner: Combiner, epsilon: f64) -> Self {
        Self {
            driver: Driver::Apgd,
            steps: APGD_STEPS,
            step_size: 2.0 * epsilon,
            momentum: APGD_MOMENTUM,
            checkpoints: checkpoint_schedule(APGD_STEPS),
            ..Self::fgsm(combiner, epsilon)
        }
    }

    /// Driver defaults for `driver`.
    pub fn for_driver(driver: Driver, combiner: Combiner, epsilon: f64) -> Self {
        match driver {
            Driver::Fgsm => Self::fgsm(combiner, epsilon),
            Driver::Pgd => Self::pgd(combiner, epsilon),
            Driver::Apgd => Self::apgd(combiner, epsilon),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        self.budget.validate()?;
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return bad(format!("step size must be finite and ≥ 0, got {}", self.step_size));
        }
        match self.driver {
            Driver::Fgsm if self.steps != 1 => return bad(format!("FGSM takes exactly one step, got {}", self.steps)),
            Driver::Pgd | Driver::Apgd if self.steps == 0 => return bad("at least one step is required".into()),
            Driver::Apgd if !(self.momentum > 0.0 && self.momentum <= 1.0) => {
                return bad(format!("APGD momentum must lie in (0, 1], got {}", self.momentum))
            }
            _ => {}
        }
        if self.driver == Driver::Apgd {
            let w = &self.checkpoints;
            if w.iter().any(|&k| k == 0 || k >= self.steps) || w.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("checkpoints {w:?} must increase strictly within [1, {})", self.steps));
            }
        }
        if self.early_stop.is_some() && self.driver != Driver::Pgd {
            return bad("early stopping is only available for PGD".into());
        }
        Ok(())
    }
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got `{other}`"))),
            },
        }
    }
}

/// State after one attack iterate. Step 0 is the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStep {
    pub step: usize,
    /// Floored per-task batch-mean losses at this iterate.
    pub losses: Vec<f64>,
    /// Mean relative loss change against the clean losses.
    pub relative_loss_change: f64,
    /// Value of the driver's tracked objective.
    pub objective: f64,
    /// Best objective so far.
    pub best_objective: f64,
    /// Step size in effect after this iterate.
    pub step_size: f64,
    /// Dominance ratio of the task gradients at this iterate.
    #[serde(with = "inf_as_string")]
    pub dominance_ratio: f64,
    pub linf_distance: f64,
    pub in_range: bool,
    /// APGD halved the step size and restarted from the best iterate here.
    pub restarted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub driver: Driver,
    pub combiner: Combiner,
    pub epsilon: f64,
    pub initial_losses: Vec<f64>,
    pub steps: Vec<AttackStep>,
    /// Returned adversarial batch: the last iterate for FGSM/PGD, the best
    /// iterate for APGD.
    pub x_adv: Tensor,
    pub final_losses: Vec<f64>,
    pub iterates: Vec<Tensor>,
}

impl AttackTrace {
    pub fn best_objectives(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.best_objective).collect()
    }

    /// Mean relative loss change of the returned batch.
    pub fn final_relative_loss_change(&self) -> f64 {
        crate::metrics::mean_relative_loss_change(&self.initial_losses, &self.final_losses).unwrap_or(f64::NAN)
    }
}
