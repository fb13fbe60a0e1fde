//! The train/sweep pipeline: one independent cell per (train seed, depth).

use std::path::{Path, PathBuf};
use std::time::Instant;

use dnsd::benchmark::{load_external, load_or_generate, DatasetBundle, SyntheticConfig};
use dnsd::layers::{Checkpoint, GraphContext, Model};
use dnsd::training::{argmax_rows, evaluate, train_observed, EpochRecord, EvalReport, GraphAccuracy};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io;
use crate::results::{self, ResultRow, ResultsFile, RowContext, RunRecord, RunStatus, RESULTS_FILE};
use crate::spec::{DatasetSpec, ExperimentSpec, EFFECTIVE_CONFIG};

pub const RUNS_FILE: &str = "runs.json";
pub const TIMINGS_FILE: &str = "timings.csv";

/// Loaded graphs for one experiment.
pub struct Prepared {
    pub dataset: String,
    train: Vec<(u64, DatasetBundle)>,
    test: Vec<DatasetBundle>,
    external: bool,
}

impl Prepared {
    /// Synthetic graphs come from the cache, generated on demand.
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        match &spec.dataset {
            DatasetSpec::Synthetic { level } => {
                let dir = spec.cache_dir();
                let fetch = |seed: u64| -> Result<DatasetBundle> {
                    Ok(load_or_generate(&dir, &SyntheticConfig::new(*level, seed))?.0)
                };
                let train = spec
                    .train_seeds
                    .iter()
                    .map(|&s| fetch(s).map(|b| (s, b)))
                    .collect::<Result<_>>()?;
                let test = spec.test_seeds.iter().map(|&s| fetch(s)).collect::<Result<_>>()?;
                Ok(Self {
                    dataset: format!("G{level}"),
                    train,
                    test,
                    external: false,
                })
            }
            DatasetSpec::External { path } => {
                let bundle = load_external(path)?;
                if bundle.split.test.is_empty() {
                    return Err(CliError::Spec(format!("{} has no test nodes", path.display())));
                }
                Ok(Self {
                    dataset: bundle.name.clone(),
                    train: vec![(0, bundle)],
                    test: Vec::new(),
                    external: true,
                })
            }
        }
    }

    /// Training graph for a seed; external data has a single graph.
    pub fn train_bundle(&self, seed: u64) -> &DatasetBundle {
        if self.external {
            return &self.train[0].1;
        }
        &self.train.iter().find(|(s, _)| *s == seed).expect("seed was loaded").1
    }

    /// Pooled accuracy on the test graphs, or on the test split of an
    /// external dataset.
    pub fn evaluate(&self, model: &Model, seed: u64) -> Result<EvalReport> {
        if !self.external {
            let refs: Vec<&DatasetBundle> = self.test.iter().collect();
            return Ok(evaluate(model, &refs)?);
        }
        let b = self.train_bundle(seed);
        let logits = model.predict(&b.features, &GraphContext::new(&b.graph))?;
        let pred = argmax_rows(&logits);
        let correct = b.split.test.iter().filter(|&&i| pred[i] == b.labels[i]).count();
        let total = b.split.test.len();
        let acc = correct as f64 / total as f64;
        Ok(EvalReport {
            per_graph: vec![GraphAccuracy {
                name: format!("{}:test", b.name),
                correct,
                total,
                accuracy: acc,
            }],
            pooled: acc,
        })
    }
}

pub fn run_dir(out: &Path, seed: u64, depth: usize) -> PathBuf {
    out.join("runs").join(format!("seed{seed}")).join(format!("L{depth}"))
}

#[derive(Serialize)]
struct RunError<'a> {
    code: &'a str,
    message: String,
}

struct CellOutcome {
    record: RunRecord,
    wall_time_s: f64,
}

/// Train and evaluate one cell, writing its report, checkpoint and epoch
/// trace. Failures become a `failed` record rather than an error.
fn run_cell(spec: &ExperimentSpec, data: &Prepared, seed: u64, depth: usize) -> CellOutcome {
    let start = Instant::now();
    let dir = run_dir(&spec.out, seed, depth);
    let record = match train_cell(spec, data, seed, depth, &dir) {
        Ok(record) => record,
        Err(e) => {
            let body = RunError {
                code: e.code(),
                message: e.to_string(),
            };
            let _ = io::write_json(&dir.join("error.json"), &body);
            RunRecord::failed(seed, depth, e.to_string())
        }
    };
    CellOutcome {
        record,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

fn train_cell(spec: &ExperimentSpec, data: &Prepared, seed: u64, depth: usize, dir: &Path) -> Result<RunRecord> {
    let bundle = data.train_bundle(seed);
    let mut model = Model::new(spec.model_config(bundle.feature_dim(), bundle.classes, depth, seed))?;
    let mut config = spec.train.clone();
    config.seed = seed;
    let mut trace: Vec<EpochRecord> = Vec::new();
    let mut report = train_observed(&mut model, bundle, &config, |r| trace.push(r.clone()))?;
    let eval = data.evaluate(&model, seed)?;
    report.test = Some(eval.clone());
    // Timings live in timings.csv so that result files are reproducible.
    report.wall_time_s = 0.0;

    io::write_json(&dir.join("report.json"), &report)?;
    Checkpoint::from_model(&model).save(&dir.join("checkpoint.json"))?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &dir.join("epochs.csv"),
        &["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"],
        &rows,
    )?;
    Ok(RunRecord {
        seed,
        depth,
        status: RunStatus::Ok,
        error: None,
        epochs: Some(report.epochs.len()),
        best_epoch: Some(report.best_epoch),
        val_acc: Some(report.best_val_acc),
        test_acc: Some(eval.pooled),
        per_graph: eval.per_graph,
    })
}

/// What a pipeline run produced.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub out: PathBuf,
    pub runs: usize,
    pub failed: usize,
    pub rows: Vec<ResultRow>,
}

/// Run every cell, then aggregate. With `curves`, also write the per-depth
/// curve and per-seed best depths.
pub fn execute(spec: &ExperimentSpec, curves: bool) -> Result<Summary> {
    spec.validate()?;
    io::create_dir(&spec.out)?;
    spec.save(&spec.out.join(EFFECTIVE_CONFIG))?;
    let data = Prepared::load(spec)?;

    let cells: Vec<(u64, usize)> = spec
        .train_seeds
        .iter()
        .flat_map(|&s| spec.depths.iter().map(move |&d| (s, d)))
        .collect();
    let total = cells.len();
    let run = |(i, &(seed, depth)): (usize, &(u64, usize))| {
        let outcome = run_cell(spec, &data, seed, depth);
        progress(i, total, &outcome);
        outcome
    };
    let outcomes: Vec<CellOutcome> = if spec.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", spec.workers)))?;
        pool.install(|| cells.par_iter().enumerate().map(run).collect())
    } else {
        cells.iter().enumerate().map(run).collect()
    };

    let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    io::write_json(&spec.out.join(RUNS_FILE), &records)?;
    let timings: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.record.seed.to_string(),
                o.record.depth.to_string(),
                o.wall_time_s.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &spec.out.join(TIMINGS_FILE),
        &["seed", "depth", "wall_time_s"],
        &timings,
    )?;

    let ctx = RowContext {
        dataset: data.dataset.clone(),
        level: spec.dataset.level(),
        model: spec.family,
        map: spec.map,
        flags: spec.flags,
    };
    let rows = results::aggregate(&ctx, &spec.depths, &records)?;
    let seed_best = results::per_seed_best(&spec.train_seeds, &records);
    let file = ResultsFile::new(rows.clone(), seed_best.clone());
    io::write_json(&spec.out.join(RESULTS_FILE), &file)?;
    let table: Vec<Vec<String>> = rows.iter().map(results::row_record).collect();
    io::write_csv(&spec.out.join("results.csv"), &results::ROW_HEADER, &table)?;

    if curves {
        let curve: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.depth.to_string(), r.mean.to_string(), r.std.to_string()])
            .collect();
        io::write_csv(&spec.out.join("curve.csv"), &["depth", "mean", "std"], &curve)?;
        let best: Vec<Vec<String>> = seed_best
            .iter()
            .map(|b| {
                vec![
                    b.seed.to_string(),
                    b.depth.to_string(),
                    b.val_acc.to_string(),
                    b.test_acc.to_string(),
                ]
            })
            .collect();
        io::write_csv(
            &spec.out.join("per_seed_best.csv"),
            &["seed", "depth", "val_acc", "test_acc"],
            &best,
        )?;
    }

    let failed = records.iter().filter(|r| r.status == RunStatus::Failed).count();
    Ok(Summary {
        out: spec.out.clone(),
        runs: records.len(),
        failed,
        rows,
    })
}

fn progress(i: usize, total: usize, o: &CellOutcome) {
    let r = &o.record;
    match (r.val_acc, r.test_acc) {
        (Some(val), Some(test)) => eprintln!(
            "[{}/{total}] seed {} depth {}: val {val:.3} test {test:.3} ({:.1}s)",
            i + 1,
            r.seed,
            r.depth,
            o.wall_time_s
        ),
        _ => eprintln!(
            "[{}/{total}] seed {} depth {}: failed: {}",
            i + 1,
            r.seed,
            r.depth,
            r.error.as_deref().unwrap_or("unknown error")
        ),
    }
}
