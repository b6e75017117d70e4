use std::fmt;
use std::path::Path;

use mtlab_core::attackkit::{Combiner, Driver};
use mtlab_core::mtlnet::{standard_tasks, Layout, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::LabError;

/// Radius in input units. Config files may write it as a number or as `k/255`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Epsilon(pub f64);

impl Epsilon {
    pub fn parse(text: &str) -> Result<Self, String> {
        let t = text.trim();
        let value = match t.split_once('/') {
            Some((num, den)) => {
                let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in `{t}`"))?;
                let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in `{t}`"))?;
                if den == 0.0 {
                    return Err(format!("zero denominator in `{t}`"));
                }
                num / den
            }
            None => t.parse().map_err(|_| format!("`{t}` is not a number"))?,
        };
        Ok(Epsilon(value))
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Epsilon(v)),
            Repr::Int(v) => Ok(Epsilon(v as f64)),
            Repr::Text(t) => Epsilon::parse(&t).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub tasks: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub correlation: f64,
    #[serde(default = "default_latent")]
    pub latent: usize,
    /// Input coordinates read by each teacher latent; omitted means all.
    #[serde(default)]
    pub support: Option<usize>,
}

fn default_latent() -> usize {
    8
}

impl DatasetConfig {
    pub fn spec(&self, correlation: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            tasks: standard_tasks(self.tasks),
            input_dim: self.input_dim,
            train_size: self.train_size,
            test_size: self.test_size,
            correlation,
            latent: self.latent,
            support: self.support.unwrap_or(self.input_dim),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    /// Number of leading all-shared blocks; 0 is independent, `blocks` is all-shared.
    #[serde(default)]
    pub sharing_levels: Vec<usize>,
    /// Explicit layouts in bracketed-set text.
    #[serde(default)]
    pub layouts: Vec<Layout>,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGridConfig {
    pub drivers: Vec<Driver>,
    pub combiners: Vec<Combiner>,
    pub epsilons: Vec<Epsilon>,
    /// Test rows attacked together; 1 attacks every example on its own.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_chunk() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub driver: Driver,
    pub epsilon: Epsilon,
    /// Extra task correlations whose models are trained only for diagnosis.
    #[serde(default)]
    pub extra_correlations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrainConfig {
    /// Combiners used as the inner attack, one robust model each.
    pub defenses: Vec<Combiner>,
    pub sharing_level: usize,
    pub epsilon: Epsilon,
    pub max_steps: usize,
    pub tau: usize,
    #[serde(default)]
    pub early_stop_threshold: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Rows per inner attack; omitted attacks each minibatch as a whole.
    #[serde(default)]
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Independent dataset and model draws; replicate `r` uses seed `seed + r`.
    pub replicates: usize,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_output")]
    pub output: String,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub attack: AttackGridConfig,
    #[serde(default)]
    pub diagnose: Option<DiagnoseConfig>,
    #[serde(default)]
    pub advtrain: Option<AdvTrainConfig>,
}

fn default_output() -> String {
    "out".into()
}

/// One trained architecture of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub layout: Layout,
    /// Number of all-shared leading blocks when the model comes from a sharing level.
    pub sharing_level: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let config: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        self.dataset.spec(self.dataset.correlation, self.seed).validate()?;
        self.train_config(0).validate()?;
        if self.model.widths.is_empty() {
            return bad("model.widths must not be empty".into());
        }
        let models = self.models()?;
        if models.is_empty() {
            return bad("model grid is empty; give sharing_levels or layouts".into());
        }
        let eps = &self.attack.epsilons;
        if eps.iter().any(|e| !(e.0 >= 0.0) || !e.0.is_finite()) {
            return bad("epsilons must be finite and non-negative".into());
        }
        if eps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("epsilons must be sorted and distinct".into());
        }
        if self.attack.chunk == 0 {
            return bad("attack.chunk must be positive".into());
        }
        for c in &self.attack.combiners {
            c.check_tasks(self.dataset.tasks)?;
        }
        if let Some(d) = &self.diagnose {
            if d.extra_correlations.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("diagnose.extra_correlations must lie in [0, 1]".into());
            }
            if !(d.epsilon.0 >= 0.0) {
                return bad("diagnose.epsilon must be non-negative".into());
            }
        }
        if let Some(a) = &self.advtrain {
            if a.sharing_level > self.model.blocks {
                return bad(format!("advtrain.sharing_level {} exceeds {} blocks", a.sharing_level, self.model.blocks));
            }
            if !self.model.sharing_levels.contains(&a.sharing_level) {
                return bad(format!("advtrain.sharing_level {} is not in model.sharing_levels", a.sharing_level));
            }
            for c in &a.defenses {
                c.check_tasks(self.dataset.tasks)?;
            }
            self.fat_config(a, Combiner::Dgba, 0).validate()?;
        }
        Ok(())
    }

    /// Every grid architecture in canonical order: sharing levels, then layouts.
    pub fn models(&self) -> Result<Vec<ModelSpec>, LabError> {
        let n = self.dataset.tasks;
        let mut out = Vec::new();
        for &k in &self.model.sharing_levels {
            if k > self.model.blocks {
                return Err(LabError::Config(format!("sharing level {k} exceeds {} blocks", self.model.blocks)));
            }
            out.push(ModelSpec { id: format!("{k}L"), layout: Layout::sharing_level(n, self.model.blocks, k), sharing_level: Some(k) });
        }
        for (i, layout) in self.model.layouts.iter().enumerate() {
            layout.validate().map_err(mtlab_core::mtlnet::MtlError::from)?;
            if layout.task_count() != n {
                return Err(LabError::Config(format!("layout {i} covers {} tasks, dataset has {n}", layout.task_count())));
            }
            out.push(ModelSpec { id: format!("layout{i}"), layout: layout.clone(), sharing_level: None });
        }
        Ok(out)
    }

    /// Main correlation first, then the extra diagnosis correlations.
    pub fn diagnose_correlations(&self) -> Vec<f64> {
        let mut out = vec![self.dataset.correlation];
        if let Some(d) = &self.diagnose {
            for &c in &d.extra_correlations {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.seed.wrapping_add(replicate as u64)
    }

    pub fn train_config(&self, replicate: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            seed: self.replicate_seed(replicate),
        }
    }

    pub fn fat_config(&self, a: &AdvTrainConfig, defense: Combiner, replicate: usize) -> mtlab_core::advtrain::FatConfig {
        let train = TrainConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: self.replicate_seed(replicate) };
        let mut fat = mtlab_core::advtrain::FatConfig::new(defense, a.epsilon.0, train);
        fat.max_steps = a.max_steps;
        fat.tau = a.tau;
        fat.early_stop_threshold = a.early_stop_threshold;
        fat.attack_chunk = a.chunk;
        fat.attack.seed = self.replicate_seed(replicate);
        fat
    }

    /// Hex SHA-256 of the canonical (sorted-key) JSON form, ignoring the
    /// output directory.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.output = String::new();
        let value = serde_json::to_value(&hashed).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The hash prefix used for the run directory name.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
