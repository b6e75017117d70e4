//! Adversarial training with a multi-task inner attack, and the
//! defense-by-attack robustness matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attackkit::{attack_in_chunks, AttackConfig, AttackError, Combiner, Driver, EarlyStop};
use crate::metrics::{arp, MetricSnapshot, MetricsError};
use crate::mtlnet::{epoch_batches, evaluate_metrics, sgd_step, total_loss, BranchedModel, LabeledBatch, MtlError, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvError {
    #[error("invalid adversarial training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed robustness table: {0}")]
    Table(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] MtlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatConfig {
    /// Inner PGD attack. Its step count is replaced by `max_steps`.
    pub attack: AttackConfig,
    /// K. Zero trains on clean batches.
    pub max_steps: usize,
    /// τ: extra inner steps after the early-stop threshold is crossed.
    pub tau: usize,
    /// Mean relative loss change that triggers the early stop. `None` runs
    /// all K steps.
    pub early_stop_threshold: Option<f64>,
    pub train: TrainConfig,
    /// Rows per inner attack; `None` attacks each minibatch as a whole.
    pub attack_chunk: Option<usize>,
}

impl FatConfig {
    /// K = τ = 20 PGD with the given combiner, no early stop.
    pub fn new(combiner: Combiner, epsilon: f64, train: TrainConfig) -> Self {
        Self {
            attack: AttackConfig::pgd(combiner, epsilon),
            max_steps: 20,
            tau: 20,
            early_stop_threshold: None,
            train,
            attack_chunk: None,
        }
    }

    pub fn validate(&self) -> Result<(), AdvError> {
        self.train.validate()?;
        if self.attack.driver != Driver::Pgd {
            return Err(AdvError::InvalidConfig(format!("inner attack must be PGD, got {}", self.attack.driver)));
        }
        if self.max_steps > 0 && !(1..=self.max_steps).contains(&self.tau) {
            return Err(AdvError::InvalidConfig(format!("τ = {} must lie in [1, K = {}]", self.tau, self.max_steps)));
        }
        if self.attack_chunk == Some(0) {
            return Err(AdvError::InvalidConfig("attack chunk must be positive".into()));
        }
        if self.max_steps > 0 {
            self.inner().validate()?;
        }
        Ok(())
    }

    fn inner(&self) -> AttackConfig {
        AttackConfig {
            steps: self.max_steps,
            early_stop: self.early_stop_threshold.map(|threshold| EarlyStop { threshold, extra_steps: self.tau }),
            record_iterates: false,
            ..self.attack.clone()
        }
    }
}

/// Per-epoch record of an adversarial training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatEpoch {
    /// Summed clean training loss after the epoch.
    pub clean_loss: f64,
    /// Mean over minibatches of the summed loss on the adversarial batch,
    /// measured before each update.
    pub adversarial_loss: f64,
    /// Largest ℓ∞ distance of any adversarial example from its clean input.
    pub max_linf: f64,
    /// Whether every adversarial example stayed inside the valid range.
    pub in_range: bool,
}

/// Trains `model` on adversarial minibatches of `data`. With K = 0 this is
/// exactly [`crate::mtlnet::train`] with the same training config.
pub fn fat_train(model: &mut BranchedModel, data: &LabeledBatch, config: &FatConfig) -> Result<Vec<FatEpoch>, AdvError> {
    config.validate()?;
    data.validate(model.tasks())?;
    let inner = config.inner();
    let budget = inner.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut trace = Vec::with_capacity(config.train.epochs);
    let mut batch_index = 0u64;
    for epoch in 1..=config.train.epochs {
        let mut adv_sum = 0.0;
        let mut batches = 0usize;
        let mut max_linf = 0.0f64;
        let mut in_range = true;
        for idx in epoch_batches(data.rows(), config.train.batch_size, &mut rng) {
            let clean = data.select(&idx);
            let batch = if config.max_steps == 0 {
                clean
            } else {
                let mut cfg = inner.clone();
                cfg.seed = inner.seed.wrapping_add(batch_index << 32);
                let chunk = config.attack_chunk.unwrap_or(clean.rows());
                let adv = attack_in_chunks(model, &clean, &cfg, chunk)?;
                max_linf = max_linf.max(adv.x_adv.linf_distance(&clean.x));
                in_range &= adv.x_adv.data().iter().all(|&v| v >= budget.lower && v <= budget.upper);
                clean.with_inputs(adv.x_adv)
            };
            batch_index += 1;
            let losses = sgd_step(model, &batch, config.train.lr).map_err(|e| match e {
                MtlError::Divergence { .. } => MtlError::Divergence { epoch },
                other => other,
            })?;
            adv_sum += losses.iter().sum::<f64>();
            batches += 1;
        }
        let clean_loss = total_loss(model, data)?;
        if !clean_loss.is_finite() || model.parameters().iter().any(|p| !p.all_finite()) {
            return Err(MtlError::Divergence { epoch }.into());
        }
        trace.push(FatEpoch { clean_loss, adversarial_loss: adv_sum / batches as f64, max_linf, in_range });
    }
    Ok(trace)
}

/// One attack column of the robustness matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub driver: Driver,
    pub combiner: Combiner,
}

impl AttackSpec {
    pub fn label(&self) -> String {
        format!("{}-{}", self.driver, self.combiner)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCell {
    pub attack: String,
    pub after: MetricSnapshot,
    pub arp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `clean` or the combiner the model was trained against.
    pub defense: String,
    pub clean: MetricSnapshot,
    /// ARP of this model's clean metrics against the clean-trained model's.
    pub clean_cost: f64,
    pub cells: Vec<RobustnessCell>,
}

/// Flat view of one matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub defense: String,
    pub attack: String,
    pub epsilon: f64,
    pub arp: f64,
    pub clean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessMatrix {
    pub epsilon: f64,
    pub attacks: Vec<String>,
    pub rows: Vec<RobustnessRow>,
}

/// Defense-by-attack ARP table as parsed back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessTable {
    pub attacks: Vec<String>,
    /// `(defense, clean_cost, arp per attack)`.
    pub rows: Vec<(String, f64, Vec<f64>)>,
}

impl RobustnessMatrix {
    pub fn records(&self) -> Vec<RobustnessRecord> {
        self.rows
            .iter()
            .flat_map(|r| {
                r.cells.iter().map(|c| RobustnessRecord {
                    defense: r.defense.clone(),
                    attack: c.attack.clone(),
                    epsilon: self.epsilon,
                    arp: c.arp,
                    clean_cost: r.clean_cost,
                })
            })
            .collect()
    }

    pub fn table(&self) -> RobustnessTable {
        RobustnessTable {
            attacks: self.attacks.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| (r.defense.clone(), r.clean_cost, r.cells.iter().map(|c| c.arp).collect()))
                .collect(),
        }
    }

    /// ARP of `attack` against the row labelled `defense`.
    pub fn arp(&self, defense: &str, attack: &str) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.defense == defense)?;
        row.cells.iter().find(|c| c.attack == attack).map(|c| c.arp)
    }

    pub fn to_csv(&self) -> String {
        self.table().to_csv()
    }
}

impl RobustnessTable {
    /// Header `defense,clean_cost,<attack>…`, one row per defense.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["defense".to_string(), "clean_cost".to_string()];
        header.extend(self.attacks.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (defense, cost, arps) in &self.rows {
            let mut rec = vec![defense.clone(), cost.to_string()];
            rec.extend(arps.iter().map(f64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self, AdvError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| AdvError::Table(e.to_string()))?.clone();
        if header.len() < 2 || &header[0] != "defense" || &header[1] != "clean_cost" {
            return Err(AdvError::Table(format!("unexpected header {header:?}")));
        }
        let attacks = header.iter().skip(2).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| AdvError::Table(e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| AdvError::Table(format!("`{s}`: {e}")));
            let arps = rec.iter().skip(2).map(num).collect::<Result<_, _>>()?;
            rows.push((rec[0].to_string(), num(&rec[1])?, arps));
        }
        Ok(Self { attacks, rows })
    }
}

/// Attacks the clean-trained model and every defended model at radius
/// `epsilon` with each attack in `attacks`. Row 0 is `clean`.
pub fn robust_eval(
    clean: &BranchedModel,
    defended: &[(String, BranchedModel)],
    test: &LabeledBatch,
    attacks: &[AttackSpec],
    epsilon: f64,
    chunk: usize,
) -> Result<RobustnessMatrix, AdvError> {
    let baseline = evaluate_metrics(clean, test)?;
    let mut rows = Vec::with_capacity(defended.len() + 1);
    let models = std::iter::once(("clean", clean)).chain(defended.iter().map(|(l, m)| (l.as_str(), m)));
    for (label, model) in models {
        let before = evaluate_metrics(model, test)?;
        let clean_cost = arp(&baseline, &before)?.overall;
        let mut cells = Vec::with_capacity(attacks.len());
        for spec in attacks {
            let config = AttackConfig::for_driver(spec.driver, spec.combiner, epsilon);
            let adv = attack_in_chunks(model, test, &config, chunk)?;
            let after = evaluate_metrics(model, &test.with_inputs(adv.x_adv))?;
            cells.push(RobustnessCell { attack: spec.label(), arp: arp(&before, &after)?.overall, after });
        }
        rows.push(RobustnessRow { defense: label.to_string(), clean: before, clean_cost, cells });
    }
    Ok(RobustnessMatrix { epsilon, attacks: attacks.iter().map(AttackSpec::label).collect(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtlnet::{standard_tasks, train, Layout, SyntheticSpec};

    fn setup(seed: u64) -> (BranchedModel, crate::mtlnet::SyntheticDataset) {
        let data = SyntheticSpec::standard(3, 12, 48, 16, 0.8, seed).generate().unwrap();
        let m = BranchedModel::build(Layout::sharing_level(3, 3, 1), 12, &[10], standard_tasks(3), seed).unwrap();
        (m, data)
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig { epochs: 3, lr: 0.05, batch_size: 16, seed: 4 }
    }

    #[test]
    fn zero_inner_steps_is_clean_training() {
        let (m, data) = setup(0);
        let mut a = m.clone();
        let mut b = m;
        let mut cfg = FatConfig::new(Combiner::Dgba, 8.0 / 255.0, train_cfg());
        cfg.max_steps = 0;
        let fat = fat_train(&mut a, &data.train, &cfg).unwrap();
        let plain = train(&mut b, &data.train, &train_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(fat.iter().map(|e| e.clean_loss).collect::<Vec<_>>(), plain);
    }

    #[test]
    fn tau_equal_to_k_never_truncates() {
        let (m, data) = setup(1);
        let mut cfg = FatConfig::new(Combiner::Dgba, 8.0 / 255.0, train_cfg());
        cfg.max_steps = 5;
        cfg.tau = 5;
        let mut a = m.clone();
        fat_train(&mut a, &data.train, &cfg).unwrap();
        cfg.early_stop_threshold = Some(0.0);
        let mut b = m;
        fat_train(&mut b, &data.train, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adversarial_batches_respect_the_budget_and_are_deterministic() {
        let (m, data) = setup(2);
        let mut cfg = FatConfig::new(Combiner::Total, 0.05, train_cfg());
        cfg.max_steps = 4;
        cfg.tau = 2;
        cfg.attack.random_start = true;
        cfg.attack_chunk = Some(3);
        let mut a = m.clone();
        let trace = fat_train(&mut a, &data.train, &cfg).unwrap();
        assert!(trace.iter().all(|e| e.max_linf <= 0.05 + 1e-12 && e.max_linf > 0.0 && e.in_range));
        let mut b = m;
        assert_eq!(fat_train(&mut b, &data.train, &cfg).unwrap(), trace);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FatConfig::new(Combiner::Dgba, 0.1, train_cfg());
        cfg.tau = 21;
        assert!(cfg.validate().is_err());
        cfg.tau = 0;
        assert!(cfg.validate().is_err());
        cfg.max_steps = 0;
        assert!(cfg.validate().is_ok());
        let mut cfg = FatConfig::new(Combiner::Dgba, 0.1, train_cfg());
        cfg.attack = AttackConfig::apgd(Combiner::Dgba, 0.1);
        assert!(cfg.validate().is_err());
        let mut cfg = FatConfig::new(Combiner::Dgba, 0.1, train_cfg());
        cfg.attack_chunk = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn matrix_shape_zero_budget_and_csv() {
        let (m, data) = setup(3);
        let mut robust = m.clone();
        let mut cfg = FatConfig::new(Combiner::Dgba, 0.03, train_cfg());
        cfg.max_steps = 2;
        cfg.tau = 2;
        fat_train(&mut robust, &data.train, &cfg).unwrap();
        let attacks = [
            AttackSpec { driver: Driver::Pgd, combiner: Combiner::Total },
            AttackSpec { driver: Driver::Pgd, combiner: Combiner::Dgba },
        ];
        let zero = robust_eval(&m, &[("DGBA".into(), robust.clone())], &data.test, &attacks, 0.0, 1).unwrap();
        assert_eq!(zero.rows.len(), 2);
        assert_eq!(zero.rows[0].clean_cost, 0.0);
        assert!(zero.records().iter().all(|r| r.arp == 0.0));

        let mat = robust_eval(&m, &[("DGBA".into(), robust)], &data.test, &attacks, 0.03, 4).unwrap();
        assert_eq!(mat.attacks, vec!["PGD-Total", "PGD-DGBA"]);
        assert_eq!(mat.records().len(), 4);
        let text = mat.to_csv();
        assert!(text.starts_with("defense,clean_cost,PGD-Total,PGD-DGBA\n"));
        assert_eq!(RobustnessTable::from_csv(&text).unwrap(), mat.table());
        assert!(RobustnessTable::from_csv("a,b\n").is_err());
    }
}
