//! Per-run records, per-depth aggregation and best-depth selection.

use std::path::Path;

use dnsd::layers::{Family, Flags, MapKind};
use dnsd::training::GraphAccuracy;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io;

pub const RESULTS_FORMAT: &str = "dnsd-results";
pub const RESULTS_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Outcome of one (seed, depth) cell. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub depth: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    pub epochs: Option<usize>,
    pub best_epoch: Option<usize>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub per_graph: Vec<GraphAccuracy>,
}

impl RunRecord {
    pub fn failed(seed: u64, depth: usize, error: String) -> Self {
        Self {
            seed,
            depth,
            status: RunStatus::Failed,
            error: Some(error),
            epochs: None,
            best_epoch: None,
            val_acc: None,
            test_acc: None,
            per_graph: Vec::new(),
        }
    }

    fn scores(&self) -> Option<(f64, f64)> {
        Some((self.val_acc?, self.test_acc?))
    }
}

/// Test accuracy at one depth, summarized over train seeds, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// `G<level>` or the external dataset name.
    pub dataset: String,
    pub level: Option<u32>,
    pub model: Family,
    pub map: MapKind,
    pub flags: Flags,
    pub depth: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub mean_val: f64,
    pub n_runs: usize,
    pub n_failed: usize,
    /// Depth with the highest mean validation accuracy for this variant.
    pub best: bool,
}

impl ResultRow {
    pub fn variant_label(&self) -> String {
        crate::spec::variant_label(self.model, self.map, self.flags)
    }

    fn sort_key(&self) -> (u32, &str, Family, MapKind, Flags, usize) {
        (
            self.level.unwrap_or(u32::MAX),
            &self.dataset,
            self.model,
            self.map,
            self.flags,
            self.depth,
        )
    }
}

/// The depth each seed would pick on its own validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedBest {
    pub seed: u64,
    pub depth: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub format: String,
    pub version: u32,
    pub rows: Vec<ResultRow>,
    pub per_seed_best: Vec<SeedBest>,
}

impl ResultsFile {
    pub fn new(rows: Vec<ResultRow>, per_seed_best: Vec<SeedBest>) -> Self {
        Self {
            format: RESULTS_FORMAT.into(),
            version: RESULTS_VERSION,
            rows,
            per_seed_best,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = io::read_json(path)?;
        if file.format != RESULTS_FORMAT {
            return Err(dnsd::Error::Format(format!(
                "{}: format {:?}, expected {RESULTS_FORMAT:?}",
                path.display(),
                file.format
            ))
            .into());
        }
        if file.version != RESULTS_VERSION {
            return Err(dnsd::Error::Version {
                found: file.version.to_string(),
                expected: RESULTS_VERSION.to_string(),
            }
            .into());
        }
        Ok(file)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population (ddof 0) standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Which variant and dataset a set of runs belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RowContext {
    pub dataset: String,
    pub level: Option<u32>,
    pub model: Family,
    pub map: MapKind,
    pub flags: Flags,
}

/// One row per depth (in the order of `depths`) with at least one
/// successful run; the row with the highest mean validation accuracy is
/// marked best, ties going to the shallower depth.
pub fn aggregate(ctx: &RowContext, depths: &[usize], runs: &[RunRecord]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &depth in depths {
        let at_depth: Vec<&RunRecord> = runs.iter().filter(|r| r.depth == depth).collect();
        let scores: Vec<(f64, f64)> = at_depth.iter().filter_map(|r| r.scores()).collect();
        if scores.is_empty() {
            continue;
        }
        let val: Vec<f64> = scores.iter().map(|s| 100.0 * s.0).collect();
        let test: Vec<f64> = scores.iter().map(|s| 100.0 * s.1).collect();
        rows.push(ResultRow {
            dataset: ctx.dataset.clone(),
            level: ctx.level,
            model: ctx.model,
            map: ctx.map,
            flags: ctx.flags,
            depth,
            mean: mean(&test),
            std: population_std(&test),
            mean_val: mean(&val),
            n_runs: scores.len(),
            n_failed: at_depth.len() - scores.len(),
            best: false,
        });
    }
    if rows.is_empty() {
        return Err(CliError::AllRunsFailed(runs.len()));
    }
    mark_best(&mut rows);
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(rows)
}

fn mark_best(rows: &mut [ResultRow]) {
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &rows[b];
                row.mean_val > cur.mean_val || (row.mean_val == cur.mean_val && row.depth < cur.depth)
            }
        };
        if better {
            best = Some(i);
        }
    }
    if let Some(b) = best {
        rows[b].best = true;
    }
}

/// Per seed, the depth with the highest validation accuracy (shallower on
/// ties). Seeds without a successful run are omitted.
pub fn per_seed_best(seeds: &[u64], runs: &[RunRecord]) -> Vec<SeedBest> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut best: Option<SeedBest> = None;
        for r in runs.iter().filter(|r| r.seed == seed) {
            let Some((val, test)) = r.scores() else { continue };
            let better = best
                .as_ref()
                .is_none_or(|b| val > b.val_acc || (val == b.val_acc && r.depth < b.depth));
            if better {
                best = Some(SeedBest {
                    seed,
                    depth: r.depth,
                    val_acc: val,
                    test_acc: test,
                });
            }
        }
        out.extend(best);
    }
    out
}

pub const ROW_HEADER: [&str; 12] = [
    "dataset", "level", "model", "map", "flags", "depth", "mean", "std", "mean_val", "n_runs", "n_failed", "best",
];

pub fn row_record(r: &ResultRow) -> Vec<String> {
    vec![
        r.dataset.clone(),
        r.level.map(|l| l.to_string()).unwrap_or_default(),
        r.model.to_string(),
        r.map.to_string(),
        r.flags.to_string(),
        r.depth.to_string(),
        r.mean.to_string(),
        r.std.to_string(),
        r.mean_val.to_string(),
        r.n_runs.to_string(),
        r.n_failed.to_string(),
        r.best.to_string(),
    ]
}
