//! Experiment protocol for clstream: tuning on the first two tasks,
//! repeated sequential training with per-epoch evaluation, persistence and
//! reporting.

pub mod config;
pub mod error;
pub mod protocol;
pub mod report;
pub mod results;

use std::path::{Path, PathBuf};

use clstream_core::strategies::StrategyConfig;
use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use protocol::{run_experiment, tune, PreparedStream, RunResult, TuneOutcome};

/// Subdirectory of `output_dir` that holds one strategy/architecture pair.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .join(format!("{}_{}", cfg.strategy.name, cfg.architecture.kind))
}

/// The supplied hyperparameters, the grid's only point, or the winner of a
/// search on the first two tasks.
pub fn resolve_hyperparams(
    cfg: &ExperimentConfig,
    stream: &PreparedStream,
    supplied: Option<StrategyConfig>,
) -> Result<(StrategyConfig, Option<TuneOutcome>)> {
    if let Some(h) = supplied {
        if h.name() != cfg.strategy.name {
            return Err(Error::Config(format!(
                "hyperparameters are for `{}` but the config runs `{}`",
                h.name(),
                cfg.strategy.name
            )));
        }
        return Ok((h, None));
    }
    let candidates = cfg.strategy.candidates()?;
    if candidates.len() == 1 {
        return Ok((candidates[0].clone(), None));
    }
    let outcome = tune(cfg, stream)?;
    Ok((outcome.chosen.clone(), Some(outcome)))
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub strategy: StrategyConfig,
    pub runs: Vec<RunResult>,
}

impl ExperimentOutcome {
    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.failure.is_some()).count()
    }
}

/// Prepares the stream, settles hyperparameters, runs every repetition and
/// writes the results under [`experiment_dir`].
pub fn run_and_persist(cfg: &ExperimentConfig, supplied: Option<StrategyConfig>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let stream = PreparedStream::prepare(cfg)?;
    let (strategy, tuning) = resolve_hyperparams(cfg, &stream, supplied)?;
    let runs = run_experiment(cfg, &stream, &strategy)?;
    let dir = experiment_dir(cfg);
    let meta = results::ExperimentMetadata::new(cfg, &strategy, tuning, &runs);
    results::write_experiment(&dir, &meta, &runs)?;
    Ok(ExperimentOutcome { dir, strategy, runs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    BufferBudget,
    Curriculum,
}

#[derive(Debug)]
pub struct SweepGroup {
    pub label: String,
    pub config: ExperimentConfig,
    pub outcome: ExperimentOutcome,
}

#[derive(Clone, Debug, Serialize)]
struct SweepSummaryRow {
    axis: SweepAxis,
    value: String,
    strategy: String,
    completed_runs: usize,
    final_balanced_accuracy: Option<f64>,
    final_forgetting: Option<f64>,
    dir: PathBuf,
}

fn sweep_configs(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(String, ExperimentConfig)>> {
    let root = cfg.output_dir.join(format!("sweep_{}", serde_json::to_value(axis)?.as_str().unwrap_or("axis")));
    let with_dir = |label: String, mut c: ExperimentConfig| {
        c.output_dir = root.join(&label);
        (label, c)
    };
    let out: Vec<_> = match axis {
        SweepAxis::BufferBudget => cfg
            .sweep
            .buffer_budget
            .iter()
            .map(|&b| {
                let mut c = cfg.clone();
                c.buffer_budget = b;
                with_dir(b.to_string(), c)
            })
            .collect(),
        SweepAxis::Curriculum => cfg
            .sweep
            .curriculum
            .iter()
            .enumerate()
            .map(|(i, cur)| {
                let mut c = cfg.clone();
                c.curriculum = cur.clone();
                with_dir(format!("curriculum_{i}"), c)
            })
            .collect(),
    };
    if out.is_empty() {
        return Err(Error::Config(format!("no sweep values for {axis:?}")));
    }
    Ok(out)
}

/// Runs the full experiment once per value of `axis`, sharing the master
/// seed, and writes a `sweep.json` comparison next to the groups.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, supplied: Option<StrategyConfig>) -> Result<Vec<SweepGroup>> {
    cfg.validate()?;
    let mut groups = Vec::new();
    for (label, c) in sweep_configs(cfg, axis)? {
        log::info!("sweep {axis:?} = {label}");
        let outcome = run_and_persist(&c, supplied.clone())?;
        groups.push(SweepGroup { label, config: c, outcome });
    }
    let rows: Vec<SweepSummaryRow> = groups
        .iter()
        .map(|g| {
            let done: Vec<&RunResult> = g.outcome.runs.iter().filter(|r| r.failure.is_none()).collect();
            let avg = |f: &dyn Fn(&RunResult) -> Option<f64>| {
                let v: Vec<f64> = done.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| clstream_core::metrics::mean(&v))
            };
            SweepSummaryRow {
                axis,
                value: g.label.clone(),
                strategy: g.outcome.strategy.to_string(),
                completed_runs: done.len(),
                final_balanced_accuracy: avg(&|r| r.final_mean_balanced_accuracy),
                final_forgetting: avg(&|r| r.final_forgetting),
                dir: g.outcome.dir.clone(),
            }
        })
        .collect();
    if let Some(parent) = groups.first().and_then(|g| g.config.output_dir.parent()) {
        let path = parent.join("sweep.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&rows)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(groups)
}

/// Reads an experiment config, mapping a missing file to a config error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    ExperimentConfig::load(path)
}
