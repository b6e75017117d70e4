//! Grid execution. Every cell is an independent job keyed by its id; finished
//! cells go through the run store, so rerunning a command only computes what
//! is missing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use mtlab_core::advtrain::{fat_train, robust_eval, AttackSpec};
use mtlab_core::attackkit::{attack_in_chunks, perturbation_alignment, AttackConfig, Budget, Combiner, Driver};
use mtlab_core::metrics::{arp, MetricSnapshot};
use mtlab_core::mtlnet::{
    evaluate_metrics, standard_tasks, train, BranchedModel, DatasetEnvelope, LabeledBatch, ModelCheckpoint, DATASET_FORMAT,
    ENVELOPE_VERSION,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelSpec};
use crate::records::{AlignmentCell, AttackCell, CellRecord, CellResult, FatCell, RobustCell, RunStore, TraceSummary, TrainCell};
use crate::{plot, tables, LabError};

pub fn train_id(correlation: f64, replicate: usize, model: &str) -> String {
    format!("train/rho{correlation}/r{replicate:02}/{model}")
}

pub fn attack_id(correlation: f64, replicate: usize, model: &str, driver: Driver, combiner: Combiner, epsilon: f64) -> String {
    format!("attack/rho{correlation}/r{replicate:02}/{model}/{driver}/{combiner}/eps{epsilon}")
}

pub fn alignment_id(correlation: f64, replicate: usize, model: &str, a: usize, b: usize) -> String {
    format!("align/rho{correlation}/r{replicate:02}/{model}/{a}-{b}")
}

pub fn fat_id(replicate: usize, defense: Combiner) -> String {
    format!("fat/r{replicate:02}/{defense}")
}

pub fn robust_id(replicate: usize) -> String {
    format!("robust/r{replicate:02}")
}

/// Row label of an adversarially trained model in the robustness matrix.
pub fn defense_label(defense: Combiner) -> String {
    format!("FAT-{defense}")
}

fn slug(combiner: Combiner) -> String {
    combiner.to_string().to_ascii_lowercase().chars().filter(char::is_ascii_alphanumeric).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LabError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    let bytes = serde_json::to_vec(value).expect("value serializes");
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, LabError> {
    if !path.exists() {
        return Err(LabError::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::Records(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy)]
struct AttackJob {
    correlation: f64,
    replicate: usize,
    model: usize,
    driver: Driver,
    combiner: Combiner,
    epsilon: f64,
}

type ModelKey = (u64, usize, usize);

/// Trained model with its test split and clean test metrics.
struct Loaded {
    model: BranchedModel,
    test: LabeledBatch,
    before: MetricSnapshot,
}

pub struct Lab {
    config: ExperimentConfig,
    hash: String,
    out: PathBuf,
    models: Vec<ModelSpec>,
    store: RunStore,
}

impl Lab {
    /// Opens (or creates) the run directory `<out>/runs/<short hash>`.
    pub fn open(config: ExperimentConfig, out: &Path) -> Result<Self, LabError> {
        config.validate()?;
        let hash = config.hash();
        let models = config.models()?;
        let store = RunStore::open(&out.join("runs").join(config.short_hash()))?;
        let config_path = store.dir().join("config.json");
        let mut text = serde_json::to_string_pretty(&config).expect("config serializes");
        text.push('\n');
        fs::write(&config_path, text).map_err(|e| LabError::io(&config_path, e))?;
        Ok(Self { config, hash, out: out.to_path_buf(), models, store })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn run_dir(&self) -> &Path {
        self.store.dir()
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn data_path(&self, correlation: f64, replicate: usize) -> PathBuf {
        self.run_dir().join(format!("data/rho{correlation}-r{replicate:02}.json"))
    }

    fn model_path(&self, correlation: f64, replicate: usize, model: &str) -> String {
        format!("models/rho{correlation}-r{replicate:02}-{model}.json")
    }

    /// Generates (or loads) the dataset of one correlation and replicate.
    fn dataset(&self, correlation: f64, replicate: usize, create: bool) -> Result<DatasetEnvelope, LabError> {
        let spec = self.config.dataset.spec(correlation, self.config.replicate_seed(replicate));
        let path = self.data_path(correlation, replicate);
        if path.exists() {
            let env: DatasetEnvelope = read_json(&path)?;
            if env.format != DATASET_FORMAT || env.version != ENVELOPE_VERSION || env.spec != spec {
                return Err(LabError::Records(format!("{} does not match the config", path.display())));
            }
            return Ok(env);
        }
        if !create {
            return Err(LabError::MissingCheckpoint(path));
        }
        let data = spec.generate()?;
        let env = DatasetEnvelope::new(&spec, data.train, data.test, &self.hash);
        write_json(&path, &env)?;
        Ok(env)
    }

    fn load_model(&self, relative: &str) -> Result<BranchedModel, LabError> {
        let ck: ModelCheckpoint = read_json(&self.run_dir().join(relative))?;
        Ok(ck.to_model()?)
    }

    fn fresh_model(&self, spec: &ModelSpec, replicate: usize) -> Result<BranchedModel, LabError> {
        let c = &self.config;
        Ok(BranchedModel::build(
            spec.layout.clone(),
            c.dataset.input_dim,
            &c.model.widths,
            standard_tasks(c.dataset.tasks),
            c.replicate_seed(replicate),
        )?)
    }

    /// Trains every grid model at the main correlation.
    pub fn train(&self) -> Result<usize, LabError> {
        self.train_at(&[self.config.dataset.correlation])
    }

    fn train_at(&self, correlations: &[f64]) -> Result<usize, LabError> {
        let mut jobs = Vec::new();
        for &c in correlations {
            for r in 0..self.config.replicates {
                for m in 0..self.models.len() {
                    if !self.store.contains(&train_id(c, r, &self.models[m].id)) {
                        jobs.push((c, r, m));
                    }
                }
            }
        }
        let splits: BTreeSet<(u64, usize)> = jobs.iter().map(|&(c, r, _)| (c.to_bits(), r)).collect();
        let data: BTreeMap<(u64, usize), DatasetEnvelope> = splits
            .into_par_iter()
            .map(|(c, r)| Ok(((c, r), self.dataset(f64::from_bits(c), r, true)?)))
            .collect::<Result<_, LabError>>()?;
        jobs.par_iter().try_for_each(|&(c, r, m)| {
            let spec = &self.models[m];
            let env = &data[&(c.to_bits(), r)];
            let mut model = self.fresh_model(spec, r)?;
            let losses = train(&mut model, &env.train, &self.config.train_config(r))?;
            let clean = evaluate_metrics(&model, &env.test)?;
            let checkpoint = self.model_path(c, r, &spec.id);
            let seed = self.config.replicate_seed(r);
            write_json(&self.run_dir().join(&checkpoint), &ModelCheckpoint::from_model(&model, seed, &self.hash))?;
            self.store.append(CellRecord {
                id: train_id(c, r, &spec.id),
                result: CellResult::Train(TrainCell {
                    correlation: c,
                    replicate: r,
                    model_id: spec.id.clone(),
                    sharing_level: spec.sharing_level,
                    layout: spec.layout.clone(),
                    seed,
                    losses,
                    clean,
                    checkpoint,
                }),
            })
        })?;
        Ok(jobs.len())
    }

    fn load_trained(&self, keys: BTreeSet<ModelKey>) -> Result<BTreeMap<ModelKey, Loaded>, LabError> {
        keys.into_par_iter()
            .map(|key @ (c, r, m)| {
                let c = f64::from_bits(c);
                let model = self.load_model(&self.model_path(c, r, &self.models[m].id))?;
                let test = self.dataset(c, r, false)?.test;
                let before = evaluate_metrics(&model, &test)?;
                Ok((key, Loaded { model, test, before }))
            })
            .collect()
    }

    fn run_attacks(&self, jobs: Vec<AttackJob>) -> Result<usize, LabError> {
        let id = |j: &AttackJob| attack_id(j.correlation, j.replicate, &self.models[j.model].id, j.driver, j.combiner, j.epsilon);
        let mut seen = BTreeSet::new();
        let pending: Vec<AttackJob> =
            jobs.into_iter().filter(|j| !self.store.contains(&id(j)) && seen.insert(id(j))).collect();
        let keys = pending.iter().map(|j| (j.correlation.to_bits(), j.replicate, j.model)).collect();
        let loaded = self.load_trained(keys)?;
        let chunk = self.config.attack.chunk;
        pending.par_iter().try_for_each(|j| {
            let ctx = &loaded[&(j.correlation.to_bits(), j.replicate, j.model)];
            let mut config = AttackConfig::for_driver(j.driver, j.combiner, j.epsilon);
            config.seed = self.config.replicate_seed(j.replicate);
            let adv = attack_in_chunks(&ctx.model, &ctx.test, &config, chunk)?;
            let after = evaluate_metrics(&ctx.model, &ctx.test.with_inputs(adv.x_adv.clone()))?;
            let spec = &self.models[j.model];
            self.store.append(CellRecord {
                id: id(j),
                result: CellResult::Attack(AttackCell {
                    correlation: j.correlation,
                    replicate: j.replicate,
                    model_id: spec.id.clone(),
                    sharing_level: spec.sharing_level,
                    driver: j.driver,
                    combiner: j.combiner,
                    epsilon: j.epsilon,
                    chunk,
                    arp: arp(&ctx.before, &after)?,
                    before: ctx.before.clone(),
                    after,
                    summary: TraceSummary::from_attack(&adv),
                }),
            })
        })?;
        Ok(pending.len())
    }

    /// Runs the full attack grid at the main correlation.
    pub fn attack(&self) -> Result<usize, LabError> {
        let c = &self.config;
        let mut jobs = Vec::new();
        for r in 0..c.replicates {
            for m in 0..self.models.len() {
                for &driver in &c.attack.drivers {
                    for &combiner in &c.attack.combiners {
                        for eps in &c.attack.epsilons {
                            jobs.push(AttackJob { correlation: c.dataset.correlation, replicate: r, model: m, driver, combiner, epsilon: eps.0 });
                        }
                    }
                }
            }
        }
        self.run_attacks(jobs)
    }

    /// Single-task attacks and perturbation alignment on every model, at the
    /// main and the extra correlations. Models of the extra correlations are
    /// trained here.
    pub fn diagnose(&self) -> Result<usize, LabError> {
        let d = self.config.diagnose.as_ref().ok_or_else(|| LabError::Config("config has no [diagnose] section".into()))?;
        let correlations = self.config.diagnose_correlations();
        let mut new = self.train_at(&correlations[1..])?;
        let tasks = self.config.dataset.tasks;
        let mut jobs = Vec::new();
        let mut pairs = Vec::new();
        for &c in &correlations {
            for r in 0..self.config.replicates {
                for m in 0..self.models.len() {
                    for x in 0..tasks {
                        jobs.push(AttackJob { correlation: c, replicate: r, model: m, driver: d.driver, combiner: Combiner::Single(x), epsilon: d.epsilon.0 });
                        for y in x + 1..tasks {
                            if !self.store.contains(&alignment_id(c, r, &self.models[m].id, x, y)) {
                                pairs.push((c, r, m, x, y));
                            }
                        }
                    }
                }
            }
        }
        new += self.run_attacks(jobs)?;
        let keys = pairs.iter().map(|&(c, r, m, _, _)| (c.to_bits(), r, m)).collect();
        let loaded = self.load_trained(keys)?;
        pairs.par_iter().try_for_each(|&(c, r, m, a, b)| {
            let ctx = &loaded[&(c.to_bits(), r, m)];
            let cosine = perturbation_alignment(&ctx.model, &ctx.test, Budget::new(d.epsilon.0), d.driver, a, b)?;
            let spec = &self.models[m];
            self.store.append(CellRecord {
                id: alignment_id(c, r, &spec.id, a, b),
                result: CellResult::Alignment(AlignmentCell {
                    correlation: c,
                    replicate: r,
                    model_id: spec.id.clone(),
                    sharing_level: spec.sharing_level,
                    driver: d.driver,
                    epsilon: d.epsilon.0,
                    task_a: a,
                    task_b: b,
                    cosine,
                }),
            })
        })?;
        Ok(new + pairs.len())
    }

    /// Adversarially trains one model per defense and replicate, then
    /// evaluates the clean and defended models under the whole attack grid.
    pub fn advtrain(&self) -> Result<usize, LabError> {
        let a = self.config.advtrain.as_ref().ok_or_else(|| LabError::Config("config has no [advtrain] section".into()))?;
        let main = self.config.dataset.correlation;
        let m = self
            .models
            .iter()
            .position(|s| s.sharing_level == Some(a.sharing_level))
            .ok_or_else(|| LabError::Config(format!("advtrain.sharing_level {} is not in model.sharing_levels", a.sharing_level)))?;
        let spec = &self.models[m];
        let mut fat_jobs = Vec::new();
        for r in 0..self.config.replicates {
            for &defense in &a.defenses {
                if !self.store.contains(&fat_id(r, defense)) {
                    fat_jobs.push((r, defense));
                }
            }
        }
        let envs: BTreeMap<usize, DatasetEnvelope> =
            fat_jobs.iter().map(|&(r, _)| r).collect::<BTreeSet<_>>().into_iter().map(|r| Ok((r, self.dataset(main, r, true)?))).collect::<Result<_, LabError>>()?;
        fat_jobs.par_iter().try_for_each(|&(r, defense)| {
            let env = &envs[&r];
            let mut model = self.fresh_model(spec, r)?;
            let epochs = fat_train(&mut model, &env.train, &self.config.fat_config(a, defense, r))?;
            let checkpoint = format!("models/fat-r{r:02}-{}.json", slug(defense));
            let seed = self.config.replicate_seed(r);
            write_json(&self.run_dir().join(&checkpoint), &ModelCheckpoint::from_model(&model, seed, &self.hash))?;
            self.store.append(CellRecord {
                id: fat_id(r, defense),
                result: CellResult::Fat(FatCell { replicate: r, defense, epsilon: a.epsilon.0, epochs, checkpoint }),
            })
        })?;
        let robust: Vec<usize> = (0..self.config.replicates).filter(|&r| !self.store.contains(&robust_id(r))).collect();
        let attacks: Vec<AttackSpec> = self
            .config
            .attack
            .drivers
            .iter()
            .flat_map(|&driver| self.config.attack.combiners.iter().map(move |&combiner| AttackSpec { driver, combiner }))
            .collect();
        robust.par_iter().try_for_each(|&r| {
            let clean = self.load_model(&self.model_path(main, r, &spec.id))?;
            let test = self.dataset(main, r, false)?.test;
            let mut defended = Vec::with_capacity(a.defenses.len());
            for &defense in &a.defenses {
                let Some(CellRecord { result: CellResult::Fat(cell), .. }) = self.store.get(&fat_id(r, defense)) else {
                    return Err(LabError::Records(format!("{} is not an adversarial training cell", fat_id(r, defense))));
                };
                defended.push((defense_label(defense), self.load_model(&cell.checkpoint)?));
            }
            let matrix = robust_eval(&clean, &defended, &test, &attacks, a.epsilon.0, self.config.attack.chunk)?;
            self.store.append(CellRecord { id: robust_id(r), result: CellResult::Robust(RobustCell { replicate: r, matrix }) })
        })?;
        Ok(fat_jobs.len() + robust.len())
    }

    /// Writes `records.json`, every table that has data and the plots.
    pub fn report(&self) -> Result<Vec<PathBuf>, LabError> {
        let mut files = vec![self.store.write_records(&self.hash, self.config.seed)?];
        let record = self.store.record(&self.hash, self.config.seed);
        let report = tables::Report::new(&self.config, &self.models, &record.cells);
        let table_dir = self.out.join("tables");
        for (name, table) in report.tables() {
            fs::create_dir_all(&table_dir).map_err(|e| LabError::io(&table_dir, e))?;
            let path = table_dir.join(name);
            fs::write(&path, table.to_csv()).map_err(|e| LabError::io(&path, e))?;
            files.push(path);
        }
        files.extend(plot::write_all(&report, &self.out.join("plots"))?);
        Ok(files)
    }
}
