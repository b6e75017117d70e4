//! Experiment driver for the multi-task robustness lab: configuration, grid
//! execution with resumable records, CSV tables and SVG plots.

pub mod config;
pub mod lab;
pub mod plot;
pub mod records;
pub mod stats;
pub mod tables;

use std::path::{Path, PathBuf};

use mtlab_core::advtrain::AdvError;
use mtlab_core::attackkit::AttackError;
use mtlab_core::metrics::MetricsError;
use mtlab_core::mtlnet::MtlError;
use serde::Serialize;
use thiserror::Error;

pub use config::ExperimentConfig;
pub use lab::Lab;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing checkpoint {0}; run `train` first")]
    MissingCheckpoint(PathBuf),
    #[error("records: {0}")]
    Records(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Model(#[from] MtlError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Adv(#[from] AdvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl LabError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        LabError::Io { path: path.to_path_buf(), message: err.to_string() }
    }

    /// Stable short name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Config(_) => "config",
            LabError::Io { .. } => "io",
            LabError::MissingCheckpoint(_) => "missing-checkpoint",
            LabError::Records(_) => "records",
            LabError::Plot(_) => "plot",
            LabError::Model(_) => "model",
            LabError::Attack(_) => "attack",
            LabError::Adv(_) => "advtrain",
            LabError::Metrics(_) => "metrics",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper { error: Body { kind: self.kind(), message: self.to_string() } })
            .expect("error serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Sweep,
    Diagnose,
    Advtrain,
    Report,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// What a command did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub new_cells: usize,
    pub total_cells: usize,
    pub files: Vec<PathBuf>,
}

pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> Result<Outcome, LabError> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    let out = overrides.out.clone().unwrap_or_else(|| PathBuf::from(&config.output));
    let threads = overrides.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_with(command, config, &out))
}

pub fn run_with(command: Command, config: ExperimentConfig, out: &Path) -> Result<Outcome, LabError> {
    let lab = Lab::open(config, out)?;
    let new_cells = match command {
        Command::Train => lab.train()?,
        Command::Attack | Command::Sweep => lab.attack()?,
        Command::Diagnose => lab.diagnose()?,
        Command::Advtrain => lab.advtrain()?,
        Command::Report => 0,
    };
    let files = lab.report()?;
    Ok(Outcome { run_dir: lab.run_dir().to_path_buf(), new_cells, total_cells: lab.store().len(), files })
}
