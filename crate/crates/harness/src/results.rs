//! On-disk layout of an experiment: `metadata.json`, then per run a
//! `run_{r}.json` summary and a `run_{r}.jsonl` metric stream.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clstream_core::strategies::{StrategyConfig, SI_DAMPING};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::protocol::{MetricRecord, RunResult, TuneOutcome, METRIC_NAMES};
use crate::report::{BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES};

pub const RESULTS_FORMAT: &str = "clstream-results";
pub const RESULTS_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetadata {
    pub format: String,
    pub version: u32,
    pub library_version: String,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub strategy: StrategyConfig,
    pub tuning: Option<TuneOutcome>,
    pub n_runs: usize,
    /// Every default and convention the runs actually used.
    pub settings: serde_json::Value,
}

impl ExperimentMetadata {
    pub fn new(cfg: &ExperimentConfig, strategy: &StrategyConfig, tuning: Option<TuneOutcome>, runs: &[RunResult]) -> Self {
        let settings = serde_json::json!({
            "optimizer": "sgd",
            "epochs_per_task": cfg.epochs_per_task,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "momentum": cfg.momentum,
            "buffer_budget": cfg.buffer_budget,
            "si_damping": SI_DAMPING,
            "class_weights": runs.first().map(|r| r.class_weights),
            "class_weight_rule": "N / (2 N_c) over the first two tasks' training partitions",
            "partition": "70:15:15 by patient; validation merged into training after tuning",
            "excluded_tasks": "first two tasks when the stream has more than 5",
            "consumed_tasks": runs.first().map(|r| r.tasks.clone()),
            "decision_threshold": 0.5,
            "threshold_ties": "positive",
            "metrics": METRIC_NAMES,
            "forgetting": "max over end-of-task checkpoints minus final, averaged over previous tasks",
            "bootstrap": { "resamples": BOOTSTRAP_RESAMPLES, "level": BOOTSTRAP_LEVEL, "unit": "run-level mean" },
        });
        Self {
            format: RESULTS_FORMAT.into(),
            version: RESULTS_VERSION,
            library_version: env!("CARGO_PKG_VERSION").into(),
            fingerprint: cfg.protocol_fingerprint(),
            config: cfg.clone(),
            strategy: strategy.clone(),
            tuning,
            n_runs: runs.len(),
            settings,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_experiment(dir: &Path, meta: &ExperimentMetadata, runs: &[RunResult]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(METADATA_FILE), meta)?;
    for run in runs {
        write_json(&dir.join(format!("run_{}.json", run.run)), run)?;
        let path = dir.join(format!("run_{}.jsonl", run.run));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in &run.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_experiment(dir: &Path) -> Result<(ExperimentMetadata, Vec<RunResult>)> {
    let meta: ExperimentMetadata = read_json(&dir.join(METADATA_FILE))?;
    if meta.format != RESULTS_FORMAT || meta.version != RESULTS_VERSION {
        return Err(Error::Report(format!(
            "{} is {} v{}, expected {RESULTS_FORMAT} v{RESULTS_VERSION}",
            dir.display(),
            meta.format,
            meta.version
        )));
    }
    let mut runs = Vec::with_capacity(meta.n_runs);
    for r in 0..meta.n_runs {
        let mut run: RunResult = read_json(&dir.join(format!("run_{r}.json")))?;
        let path = dir.join(format!("run_{r}.jsonl"));
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                run.records.push(serde_json::from_str::<MetricRecord>(&line)?);
            }
        }
        runs.push(run);
    }
    Ok((meta, runs))
}

/// Directories at or below `root` that hold an experiment, sorted.
pub fn find_experiments(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        if dir.join(METADATA_FILE).is_file() {
            found.push(dir);
            continue;
        }
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().is_dir() {
                pending.push(entry.path());
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn write_tuning(dir: &Path, outcome: &TuneOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("tune.json"), outcome)?;
    write_json(&dir.join("hyperparams.json"), &outcome.chosen)
}

pub fn read_hyperparams(path: &Path) -> Result<StrategyConfig> {
    let cfg: StrategyConfig = read_json(path).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}
