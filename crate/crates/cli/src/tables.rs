//! Aggregated views of a record set and their CSV form.

use std::collections::BTreeMap;

use mtlab_core::advtrain::{RobustnessMatrix, RobustnessTable};
use mtlab_core::attackkit::{Combiner, Driver};
use mtlab_core::metrics::transferability;

use crate::config::{ExperimentConfig, ModelSpec};
use crate::lab::{alignment_id, attack_id, robust_id};
use crate::records::{AttackCell, CellRecord, CellResult};
use crate::stats::{mean, spearman};
use crate::LabError;

pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self, LabError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| LabError::Records(e.to_string()))?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()).map_err(|e| LabError::Records(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), num)
}

/// ε in units of 1/255, rounded to six decimals.
pub fn in_255ths(epsilon: f64) -> f64 {
    (epsilon * 255.0 * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub driver: Driver,
    pub combiner: Combiner,
    pub epsilon: f64,
    /// Attack cells found for this point.
    pub cells: usize,
    /// Unweighted mean overall ARP over every model and replicate.
    pub mean_arp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub correlation: f64,
    pub model_id: String,
    pub sharing_level: Option<usize>,
    pub attacked: usize,
    /// One entry per replicate with an attack cell; `None` where the attacked
    /// task itself did not degrade.
    pub values: Vec<Option<f64>>,
    /// Mean over the defined replicate values.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpearmanRow {
    pub correlation: f64,
    pub attacked: usize,
    /// Sharing levels with a defined mean transferability.
    pub levels: usize,
    pub rho: Option<f64>,
}

/// Read-only view of a record set under the grid of one config.
pub struct Report<'a> {
    config: &'a ExperimentConfig,
    models: &'a [ModelSpec],
    cells: BTreeMap<&'a str, &'a CellResult>,
}

impl<'a> Report<'a> {
    pub fn new(config: &'a ExperimentConfig, models: &'a [ModelSpec], cells: &'a [CellRecord]) -> Self {
        Self { config, models, cells: cells.iter().map(|c| (c.id.as_str(), &c.result)).collect() }
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }

    fn attack_cell(&self, c: f64, r: usize, model: &str, driver: Driver, combiner: Combiner, eps: f64) -> Option<&'a AttackCell> {
        match self.cells.get(attack_id(c, r, model, driver, combiner, eps).as_str()) {
            Some(CellResult::Attack(cell)) => Some(cell),
            _ => None,
        }
    }

    fn grid(&self) -> impl Iterator<Item = (Driver, Combiner, f64)> + '_ {
        let a = &self.config.attack;
        a.drivers
            .iter()
            .flat_map(move |&d| a.combiners.iter().flat_map(move |&c| a.epsilons.iter().map(move |e| (d, c, e.0))))
    }

    /// Every attack-grid cell at the main correlation.
    pub fn attack_table(&self) -> Table {
        let tasks = self.config.dataset.tasks;
        let mut header: Vec<String> =
            ["replicate", "model_id", "sharing_level", "driver", "combiner", "epsilon", "epsilon_255"].map(String::from).to_vec();
        header.extend((0..tasks).map(|t| format!("arp_task{t}")));
        header.extend(["arp_overall", "relative_loss_change", "median_dominance_ratio"].map(String::from));
        let mut table = Table { header, rows: Vec::new() };
        let c = self.config.dataset.correlation;
        for r in 0..self.config.replicates {
            for m in self.models {
                for (driver, combiner, eps) in self.grid() {
                    let Some(cell) = self.attack_cell(c, r, &m.id, driver, combiner, eps) else { continue };
                    let mut row = vec![
                        r.to_string(),
                        m.id.clone(),
                        m.sharing_level.map_or(String::new(), |k| k.to_string()),
                        driver.to_string(),
                        combiner.to_string(),
                        num(eps),
                        num(in_255ths(eps)),
                    ];
                    row.extend(cell.arp.per_task.iter().map(|v| num(*v)));
                    row.push(num(cell.arp.overall));
                    row.push(num(cell.summary.mean_relative_loss_change));
                    row.push(opt(cell.summary.median_dominance_ratio));
                    table.rows.push(row);
                }
            }
        }
        table
    }

    /// Mean overall ARP per model, driver and ε with one column per combiner.
    pub fn attack_wide(&self) -> Table {
        let a = &self.config.attack;
        let mut header: Vec<String> = ["model_id", "driver", "epsilon", "epsilon_255"].map(String::from).to_vec();
        header.extend(a.combiners.iter().map(Combiner::to_string));
        let mut table = Table { header, rows: Vec::new() };
        let c = self.config.dataset.correlation;
        for m in self.models {
            for &driver in &a.drivers {
                for eps in &a.epsilons {
                    let mut row = vec![m.id.clone(), driver.to_string(), num(eps.0), num(in_255ths(eps.0))];
                    let mut any = false;
                    for &combiner in &a.combiners {
                        let vals: Vec<f64> = (0..self.config.replicates)
                            .filter_map(|r| self.attack_cell(c, r, &m.id, driver, combiner, eps.0))
                            .map(|cell| cell.arp.overall)
                            .collect();
                        any |= !vals.is_empty();
                        row.push(mean(&vals).map_or(String::new(), num));
                    }
                    if any {
                        table.rows.push(row);
                    }
                }
            }
        }
        table
    }

    pub fn sweep(&self) -> Vec<SweepPoint> {
        let c = self.config.dataset.correlation;
        self.grid()
            .map(|(driver, combiner, epsilon)| {
                let vals: Vec<f64> = (0..self.config.replicates)
                    .flat_map(|r| self.models.iter().map(move |m| (r, m)))
                    .filter_map(|(r, m)| self.attack_cell(c, r, &m.id, driver, combiner, epsilon))
                    .map(|cell| cell.arp.overall)
                    .collect();
                SweepPoint { driver, combiner, epsilon, cells: vals.len(), mean_arp: mean(&vals) }
            })
            .collect()
    }

    pub fn sweep_table(&self) -> Table {
        let mut table = Table::new(&["driver", "combiner", "epsilon", "epsilon_255", "cells", "mean_overall_arp"]);
        for p in self.sweep().into_iter().filter(|p| p.cells > 0) {
            table.rows.push(vec![
                p.driver.to_string(),
                p.combiner.to_string(),
                num(p.epsilon),
                num(in_255ths(p.epsilon)),
                p.cells.to_string(),
                opt(p.mean_arp),
            ]);
        }
        table
    }

    pub fn transferability(&self) -> Vec<TransferRow> {
        let Some(d) = &self.config.diagnose else { return Vec::new() };
        let mut out = Vec::new();
        for c in self.config.diagnose_correlations() {
            for m in self.models {
                for x in 0..self.config.dataset.tasks {
                    let values: Vec<Option<f64>> = (0..self.config.replicates)
                        .filter_map(|r| self.attack_cell(c, r, &m.id, d.driver, Combiner::Single(x), d.epsilon.0))
                        .map(|cell| transferability(&cell.arp.per_task, x).ok().map(|t| t.value))
                        .collect();
                    if values.is_empty() {
                        continue;
                    }
                    let defined: Vec<f64> = values.iter().flatten().copied().collect();
                    out.push(TransferRow {
                        correlation: c,
                        model_id: m.id.clone(),
                        sharing_level: m.sharing_level,
                        attacked: x,
                        mean: mean(&defined),
                        values,
                    });
                }
            }
        }
        out
    }

    pub fn transferability_table(&self) -> Table {
        let mut table =
            Table::new(&["correlation", "model_id", "sharing_level", "attacked", "replicates", "defined", "mean_transferability"]);
        for row in self.transferability() {
            table.rows.push(vec![
                num(row.correlation),
                row.model_id,
                row.sharing_level.map_or(String::new(), |k| k.to_string()),
                row.attacked.to_string(),
                row.values.len().to_string(),
                row.values.iter().flatten().count().to_string(),
                opt(row.mean),
            ]);
        }
        table
    }

    /// Rank correlation of sharing level and mean transferability, per
    /// correlation and attacked task.
    pub fn spearman(&self) -> Vec<SpearmanRow> {
        let rows = self.transferability();
        let mut out = Vec::new();
        for c in self.config.diagnose_correlations() {
            for x in 0..self.config.dataset.tasks {
                let (levels, values): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|t| t.correlation == c && t.attacked == x)
                    .filter_map(|t| Some((t.sharing_level? as f64, t.mean?)))
                    .unzip();
                if rows.iter().any(|t| t.correlation == c && t.attacked == x) {
                    out.push(SpearmanRow { correlation: c, attacked: x, levels: levels.len(), rho: spearman(&levels, &values) });
                }
            }
        }
        out
    }

    pub fn spearman_table(&self) -> Table {
        let mut table = Table::new(&["correlation", "attacked", "levels", "spearman"]);
        for row in self.spearman() {
            table.rows.push(vec![num(row.correlation), row.attacked.to_string(), row.levels.to_string(), opt(row.rho)]);
        }
        table
    }

    pub fn alignment_table(&self) -> Table {
        let mut table = Table::new(&["correlation", "model_id", "sharing_level", "task_a", "task_b", "defined", "mean_cosine"]);
        if self.config.diagnose.is_none() {
            return table;
        }
        let tasks = self.config.dataset.tasks;
        for c in self.config.diagnose_correlations() {
            for m in self.models {
                for a in 0..tasks {
                    for b in a + 1..tasks {
                        let cosines: Vec<Option<f64>> = (0..self.config.replicates)
                            .filter_map(|r| match self.cells.get(alignment_id(c, r, &m.id, a, b).as_str()) {
                                Some(CellResult::Alignment(cell)) => Some(cell.cosine),
                                _ => None,
                            })
                            .collect();
                        if cosines.is_empty() {
                            continue;
                        }
                        let defined: Vec<f64> = cosines.iter().flatten().copied().collect();
                        table.rows.push(vec![
                            num(c),
                            m.id.clone(),
                            m.sharing_level.map_or(String::new(), |k| k.to_string()),
                            a.to_string(),
                            b.to_string(),
                            defined.len().to_string(),
                            opt(mean(&defined)),
                        ]);
                    }
                }
            }
        }
        table
    }

    /// Robustness matrices by replicate.
    pub fn robustness(&self) -> Vec<(usize, &'a RobustnessMatrix)> {
        (0..self.config.replicates)
            .filter_map(|r| match self.cells.get(robust_id(r).as_str()) {
                Some(CellResult::Robust(cell)) => Some((r, &cell.matrix)),
                _ => None,
            })
            .collect()
    }

    /// Element-wise mean of the per-replicate robustness matrices.
    pub fn robustness_mean(&self) -> Option<RobustnessTable> {
        let tables: Vec<RobustnessTable> = self.robustness().into_iter().map(|(_, m)| m.table()).collect();
        let first = tables.first()?;
        let n = tables.len() as f64;
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, (defense, _, arps))| {
                let cost = tables.iter().map(|t| t.rows[i].1).sum::<f64>() / n;
                let means = (0..arps.len()).map(|j| tables.iter().map(|t| t.rows[i].2[j]).sum::<f64>() / n).collect();
                (defense.clone(), cost, means)
            })
            .collect();
        Some(RobustnessTable { attacks: first.attacks.clone(), rows })
    }

    /// Every non-empty table by file name.
    pub fn tables(&self) -> Vec<(String, Table)> {
        let mut out = vec![
            ("attack.csv".to_string(), self.attack_table()),
            ("attack_wide.csv".to_string(), self.attack_wide()),
            ("sweep.csv".to_string(), self.sweep_table()),
            ("transferability.csv".to_string(), self.transferability_table()),
            ("spearman.csv".to_string(), self.spearman_table()),
            ("alignment.csv".to_string(), self.alignment_table()),
        ];
        if let Some(mean) = self.robustness_mean() {
            out.push(("robustness.csv".to_string(), Table::from_csv(&mean.to_csv()).expect("own csv parses")));
        }
        for (r, matrix) in self.robustness() {
            out.push((format!("robustness-r{r:02}.csv"), Table::from_csv(&matrix.to_csv()).expect("own csv parses")));
        }
        out.retain(|(_, t)| !t.rows.is_empty());
        out
    }
}
