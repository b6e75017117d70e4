//! Cell records and the append-only store behind a run directory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mtlab_core::advtrain::{FatEpoch, RobustnessMatrix};
use mtlab_core::attackkit::{ChunkedAttack, Combiner, Driver};
use mtlab_core::metrics::{ArpReport, MetricSnapshot};
use mtlab_core::mtlnet::Layout;
use serde::{Deserialize, Serialize};

use crate::LabError;

pub const RUN_FORMAT: &str = "mtlab-run";
pub const RUN_VERSION: u32 = 1;

/// Everything a run has produced so far, sorted by cell id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CellResult {
    Train(TrainCell),
    Attack(AttackCell),
    Alignment(AlignmentCell),
    Fat(FatCell),
    Robust(RobustCell),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCell {
    pub correlation: f64,
    pub replicate: usize,
    pub model_id: String,
    pub sharing_level: Option<usize>,
    pub layout: Layout,
    pub seed: u64,
    /// Summed training loss after each epoch.
    pub losses: Vec<f64>,
    /// Test-set metrics of the trained model.
    pub clean: MetricSnapshot,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub correlation: f64,
    pub replicate: usize,
    pub model_id: String,
    pub sharing_level: Option<usize>,
    pub driver: Driver,
    pub combiner: Combiner,
    pub epsilon: f64,
    pub chunk: usize,
    pub before: MetricSnapshot,
    pub after: MetricSnapshot,
    pub arp: ArpReport,
    pub summary: TraceSummary,
}

/// Aggregate of the per-chunk attack traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub chunks: usize,
    /// Mean over chunks of the final mean relative loss change.
    pub mean_relative_loss_change: f64,
    /// Most iterates taken by any chunk.
    pub max_steps: usize,
    pub restarts: usize,
    pub max_linf: f64,
    pub in_range: bool,
    /// Median over chunks of the starting gradient dominance ratio, finite
    /// ratios only.
    pub median_dominance_ratio: Option<f64>,
    /// Chunks whose starting dominance ratio was infinite.
    pub infinite_dominance: usize,
}

impl TraceSummary {
    pub fn from_attack(attack: &ChunkedAttack) -> Self {
        let traces = &attack.traces;
        let changes: Vec<f64> = traces.iter().map(|t| t.final_relative_loss_change()).collect();
        let mut ratios: Vec<f64> = Vec::new();
        let mut infinite = 0;
        for t in traces {
            match t.steps.first().map(|s| s.dominance_ratio) {
                Some(r) if r.is_finite() => ratios.push(r),
                Some(_) => infinite += 1,
                None => {}
            }
        }
        ratios.sort_by(f64::total_cmp);
        let median = match ratios.len() {
            0 => None,
            n if n % 2 == 1 => Some(ratios[n / 2]),
            n => Some(0.5 * (ratios[n / 2 - 1] + ratios[n / 2])),
        };
        let all_steps = || traces.iter().flat_map(|t| t.steps.iter());
        TraceSummary {
            chunks: traces.len(),
            mean_relative_loss_change: if changes.is_empty() { 0.0 } else { changes.iter().sum::<f64>() / changes.len() as f64 },
            max_steps: traces.iter().map(|t| t.steps.len().saturating_sub(1)).max().unwrap_or(0),
            restarts: all_steps().filter(|s| s.restarted).count(),
            max_linf: all_steps().map(|s| s.linf_distance).fold(0.0, f64::max),
            in_range: all_steps().all(|s| s.in_range),
            median_dominance_ratio: median,
            infinite_dominance: infinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCell {
    pub correlation: f64,
    pub replicate: usize,
    pub model_id: String,
    pub sharing_level: Option<usize>,
    pub driver: Driver,
    pub epsilon: f64,
    pub task_a: usize,
    pub task_b: usize,
    /// Cosine of the two single-task perturbations; `None` when either is zero.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatCell {
    pub replicate: usize,
    pub defense: Combiner,
    pub epsilon: f64,
    pub epochs: Vec<FatEpoch>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub replicate: usize,
    pub matrix: RobustnessMatrix,
}

/// Append-only cell log of one run directory. `cells.jsonl` is the source of
/// truth; `records.json` is its sorted snapshot.
pub struct RunStore {
    dir: PathBuf,
    log: Mutex<File>,
    cells: Mutex<BTreeMap<String, CellRecord>>,
}

impl RunStore {
    pub fn open(dir: &Path) -> Result<Self, LabError> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join("cells.jsonl");
        let mut cells = BTreeMap::new();
        let mut rewrite = false;
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CellRecord>(line) {
                    Ok(cell) => {
                        cells.entry(cell.id.clone()).or_insert(cell);
                    }
                    // an interrupted write leaves at most a torn last line
                    Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => rewrite = true,
                    Err(e) => return Err(LabError::Records(format!("{}:{}: {e}", path.display(), i + 1))),
                }
            }
        }
        if rewrite {
            let mut text = String::new();
            for cell in cells.values() {
                text.push_str(&serde_json::to_string(cell).expect("cell serializes"));
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| LabError::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log: Mutex::new(log), cells: Mutex::new(cells) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.cells.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.cells.lock().expect("store lock").contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<CellRecord> {
        self.cells.lock().expect("store lock").get(id).cloned()
    }

    /// Every cell, sorted by id.
    pub fn cells(&self) -> Vec<CellRecord> {
        self.cells.lock().expect("store lock").values().cloned().collect()
    }

    /// Logs a finished cell. A cell id already present is left untouched.
    pub fn append(&self, cell: CellRecord) -> Result<(), LabError> {
        let mut cells = self.cells.lock().expect("store lock");
        if cells.contains_key(&cell.id) {
            return Ok(());
        }
        let mut line = serde_json::to_string(&cell).expect("cell serializes");
        line.push('\n');
        let path = self.dir.join("cells.jsonl");
        let mut log = self.log.lock().expect("log lock");
        log.write_all(line.as_bytes()).and_then(|_| log.flush()).map_err(|e| LabError::io(&path, e))?;
        cells.insert(cell.id.clone(), cell);
        Ok(())
    }

    pub fn record(&self, config_hash: &str, seed: u64) -> RunRecord {
        RunRecord {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            cells: self.cells(),
        }
    }

    pub fn write_records(&self, config_hash: &str, seed: u64) -> Result<PathBuf, LabError> {
        let path = self.dir.join("records.json");
        let mut text = serde_json::to_string_pretty(&self.record(config_hash, seed)).expect("record serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }
}

pub fn read_records(path: &Path) -> Result<RunRecord, LabError> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| LabError::Records(format!("{}: {e}", path.display())))?;
    if record.format != RUN_FORMAT || record.version != RUN_VERSION {
        return Err(LabError::Records(format!("unsupported record format {} v{}", record.format, record.version)));
    }
    Ok(record)
}
