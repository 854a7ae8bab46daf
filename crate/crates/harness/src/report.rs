//! Summary tables and plot series from a results directory.

use std::path::Path;

use clstream_core::metrics;
use clstream_core::seed;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Split, METRIC_NAMES};
use crate::results::{find_experiments, read_experiment, ExperimentMetadata};
use crate::protocol::RunResult;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;

/// Mean of run-level values with a percentile bootstrap interval. The
/// interval is `None` for a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
}

impl Estimate {
    pub fn of(values: &[f64], seed_value: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Report("no completed runs to summarize".into()));
        }
        let ci = if values.len() >= 2 {
            Some(metrics::bootstrap_ci(values, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed_value)?)
        } else {
            None
        };
        Ok(Self {
            mean: metrics::mean(values),
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
            n: values.len(),
        })
    }

    /// True when both intervals exist and share at least one point.
    pub fn overlaps(&self, other: &Estimate) -> Option<bool> {
        let (a0, a1, b0, b1) = (self.ci_low?, self.ci_high?, other.ci_low?, other.ci_high?);
        Some(a0 <= b1 && b0 <= a1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub hyperparameters: String,
    pub architecture: String,
    pub completed_runs: usize,
    pub failed_runs: usize,
    pub final_balanced_accuracy: f64,
    pub final_balanced_accuracy_ci_low: Option<f64>,
    pub final_balanced_accuracy_ci_high: Option<f64>,
    pub final_forgetting: Option<f64>,
    pub final_forgetting_ci_low: Option<f64>,
    pub final_forgetting_ci_high: Option<f64>,
    pub note: String,
}

/// Per-epoch test balanced accuracy of one task (or the mean over seen
/// tasks when `eval_task` is empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub strategy: String,
    pub architecture: String,
    pub run: usize,
    pub split: Split,
    pub trained_task: usize,
    pub epoch: usize,
    pub global_epoch: usize,
    pub eval_task: Option<usize>,
    pub balanced_accuracy: Option<f64>,
}

/// Average balanced accuracy over the tasks seen so far, at the end of each
/// task, across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningAveragePoint {
    pub strategy: String,
    pub architecture: String,
    pub tasks_seen: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub fingerprint: String,
    pub summary: Vec<SummaryRow>,
    pub trajectories: Vec<TrajectoryPoint>,
    pub running_average: Vec<RunningAveragePoint>,
}

fn running_means(run: &RunResult) -> Vec<Option<f64>> {
    run.accuracy
        .rows()
        .iter()
        .map(|row| {
            let vals: Option<Vec<f64>> = row.iter().copied().collect();
            vals.map(|v| metrics::mean(&v))
        })
        .collect()
}

fn summarize(meta: &ExperimentMetadata, runs: &[RunResult]) -> Result<(SummaryRow, Vec<TrajectoryPoint>, Vec<RunningAveragePoint>)> {
    let strategy = meta.strategy.name().to_string();
    let architecture = meta.config.architecture.kind.to_string();
    let boot = seed::derive(meta.config.master_seed, "bootstrap");
    let completed: Vec<&RunResult> = runs.iter().filter(|r| r.failure.is_none()).collect();
    let finals: Vec<f64> = completed.iter().filter_map(|r| r.final_mean_balanced_accuracy).collect();
    let ba = Estimate::of(&finals, boot)?;
    let forgets: Vec<f64> = completed.iter().filter_map(|r| r.final_forgetting).collect();
    let fg = if forgets.is_empty() { None } else { Some(Estimate::of(&forgets, boot)?) };
    let mut notes = Vec::new();
    if finals.len() < 2 {
        notes.push("single run: confidence interval suppressed".to_string());
    }
    let failed = runs.len() - completed.len();
    if failed > 0 {
        notes.push(format!("{failed} failed run(s) excluded"));
    }
    let row = SummaryRow {
        strategy: strategy.clone(),
        hyperparameters: meta.strategy.to_string(),
        architecture: architecture.clone(),
        completed_runs: finals.len(),
        failed_runs: failed,
        final_balanced_accuracy: ba.mean,
        final_balanced_accuracy_ci_low: ba.ci_low,
        final_balanced_accuracy_ci_high: ba.ci_high,
        final_forgetting: fg.map(|f| f.mean),
        final_forgetting_ci_low: fg.and_then(|f| f.ci_low),
        final_forgetting_ci_high: fg.and_then(|f| f.ci_high),
        note: notes.join("; "),
    };

    let epochs = meta.config.epochs_per_task;
    let trajectories = runs
        .iter()
        .flat_map(|run| {
            run.records.iter().filter(|r| r.metric == METRIC_NAMES[0]).map(|r| TrajectoryPoint {
                strategy: strategy.clone(),
                architecture: architecture.clone(),
                run: r.run,
                split: r.split,
                trained_task: r.trained_task,
                epoch: r.epoch,
                global_epoch: r.trained_task * epochs + r.epoch,
                eval_task: r.eval_task,
                balanced_accuracy: r.value,
            })
        })
        .collect();

    let per_run: Vec<Vec<Option<f64>>> = completed.iter().map(|r| running_means(r)).collect();
    let n_tasks = per_run.iter().map(Vec::len).max().unwrap_or(0);
    let mut running = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let vals: Vec<f64> = per_run.iter().filter_map(|r| r.get(k).copied().flatten()).collect();
        if vals.is_empty() {
            continue;
        }
        let e = Estimate::of(&vals, seed::derive_indexed(boot, "running", k as u64))?;
        running.push(RunningAveragePoint {
            strategy: strategy.clone(),
            architecture: architecture.clone(),
            tasks_seen: k + 1,
            mean: e.mean,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            runs: e.n,
        });
    }
    Ok((row, trajectories, running))
}

/// Builds the report for every experiment at or below `dir`. All of them
/// must share one protocol fingerprint.
pub fn build_report(dir: &Path) -> Result<Report> {
    let dirs = find_experiments(dir)?;
    if dirs.is_empty() {
        return Err(Error::Report(format!("no experiments under {}", dir.display())));
    }
    let experiments = dirs.iter().map(|d| read_experiment(d)).collect::<Result<Vec<_>>>()?;
    let mut fingerprints: Vec<String> = experiments.iter().map(|(m, _)| m.fingerprint.clone()).collect();
    fingerprints.sort();
    fingerprints.dedup();
    if fingerprints.len() > 1 {
        return Err(Error::MixedResults {
            dir: dir.to_path_buf(),
            fingerprints,
        });
    }
    let mut report = Report {
        fingerprint: fingerprints.remove(0),
        summary: Vec::new(),
        trajectories: Vec::new(),
        running_average: Vec::new(),
    };
    for (meta, runs) in &experiments {
        let (row, traj, running) = summarize(meta, runs)?;
        report.summary.push(row);
        report.trajectories.extend(traj);
        report.running_average.extend(running);
    }
    Ok(report)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e: csv::Error| Error::Report(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for row in rows {
        w.serialize(row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, `trajectories.csv`, `running_average.csv` and
/// `report.json` into `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    let r = build_report(dir)?;
    write_csv(&dir.join("summary.csv"), &r.summary)?;
    write_csv(&dir.join("trajectories.csv"), &r.trajectories)?;
    write_csv(&dir.join("running_average.csv"), &r.running_average)?;
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&r)?).map_err(|e| Error::io(&path, e))?;
    Ok(r)
}
