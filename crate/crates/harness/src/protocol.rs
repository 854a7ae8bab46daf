//! Task streams, hyperparameter search, sequential training and evaluation.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::time::Instant;

use clstream_core::autodiff::weighted_cross_entropy;
use clstream_core::data::TaskDataset;
use clstream_core::datagen::{partition_task, split_tasks};
use clstream_core::metrics::{self, AccuracyMatrix};
use clstream_core::models::{build_model, ArchitectureSpec, Model};
use clstream_core::seed;
use clstream_core::strategies::StrategyConfig;
use clstream_core::training::train_task;
use clstream_core::Result as CoreResult;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Metrics recorded per evaluated task, in record order.
pub const METRIC_NAMES: [&str; 7] = [
    "balanced_accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "auroc",
    "auprc",
    "weighted_ce",
];

/// Streams longer than this lose their first two tasks (the tuning tasks)
/// from final training and testing.
pub const MAX_TASKS_KEEPING_TUNING_TASKS: usize = 5;
const TUNING_TASKS: usize = 2;

struct Splits {
    train: TaskDataset,
    validation: TaskDataset,
    test: TaskDataset,
}

/// Per-feature standardization fitted on the training partitions of the
/// first two tasks and applied unchanged to every split of every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a TaskDataset>) -> Self {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for d in data {
            if sum.is_empty() {
                sum = vec![0.0; d.features];
                sq = vec![0.0; d.features];
            }
            for row in d.x.chunks(d.features) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut TaskDataset) {
        let f = data.features;
        for row in data.x.chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// A partitioned task stream whose split accessors count reads per task.
pub struct PreparedStream {
    pub scaler: FeatureScaler,
    pub domain_key: String,
    pub names: Vec<String>,
    splits: Vec<Splits>,
    reads: Vec<Cell<usize>>,
}

impl PreparedStream {
    /// Loads the cohort, splits it into tasks and partitions every task by
    /// patient. Partitions depend only on the master seed and the domain
    /// value, not on the task's position.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let cohort = cfg.dataset.load()?;
        let order = cfg.curriculum.task_order(cfg.master_seed)?;
        let stream = split_tasks(&cohort, &cfg.domain_key, &order)?;
        let parent = seed::derive(cfg.master_seed, "partition");
        let mut splits = Vec::with_capacity(stream.tasks.len());
        for task in &stream.tasks {
            let p = partition_task(task, true, seed::derive(parent, &task.name))?;
            let validation = p.validation.as_deref().unwrap_or_default();
            splits.push(Splits {
                train: task.subset(&p.train),
                validation: task.subset(validation),
                test: task.subset(&p.test),
            });
        }
        let scaler = FeatureScaler::fit(splits.iter().take(TUNING_TASKS).map(|s| &s.train));
        for s in &mut splits {
            for d in [&mut s.train, &mut s.validation, &mut s.test] {
                scaler.apply(d);
            }
        }
        Ok(Self {
            scaler,
            domain_key: stream.domain_key,
            names: stream.tasks.iter().map(|t| t.name.clone()).collect(),
            reads: (0..splits.len()).map(|_| Cell::new(0)).collect(),
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    fn touch(&self, task: usize) -> &Splits {
        self.reads[task].set(self.reads[task].get() + 1);
        &self.splits[task]
    }

    pub fn train(&self, task: usize) -> &TaskDataset {
        &self.touch(task).train
    }

    pub fn validation(&self, task: usize) -> &TaskDataset {
        &self.touch(task).validation
    }

    pub fn test(&self, task: usize) -> &TaskDataset {
        &self.touch(task).test
    }

    /// Split reads per task since the last reset.
    pub fn reads(&self) -> Vec<usize> {
        self.reads.iter().map(Cell::get).collect()
    }

    pub fn reset_reads(&self) {
        self.reads.iter().for_each(|c| c.set(0));
    }

    pub fn input_dims(&self) -> (usize, usize) {
        let t = &self.splits[0].train;
        (t.timesteps, t.features)
    }

    /// Indices of the tasks used for final training and testing.
    pub fn consumed_tasks(&self) -> Vec<usize> {
        if self.len() > MAX_TASKS_KEEPING_TUNING_TASKS {
            (TUNING_TASKS..self.len()).collect()
        } else {
            (0..self.len()).collect()
        }
    }

    /// `N / (2 N_c)` from the training partitions of the first two tasks.
    pub fn class_weights(&self) -> Result<[f64; 2]> {
        if self.len() < TUNING_TASKS {
            return Err(Error::Config(format!("stream has {} task(s), need at least 2", self.len())));
        }
        let mut counts = [0usize; 2];
        for i in 0..TUNING_TASKS {
            for &y in &self.train(i).labels {
                counts[usize::from(y)] += 1;
            }
        }
        if counts.contains(&0) {
            return Err(Error::Config("the first two tasks lack one outcome class".into()));
        }
        let n = (counts[0] + counts[1]) as f64;
        Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
    }
}

/// The seven metrics for one task; `None` where a metric is undefined.
pub fn task_metrics(model: &Model, data: &TaskDataset, class_weights: &[f64]) -> CoreResult<[Option<f64>; 7]> {
    let (x, y) = data.full_batch()?;
    let logits = model.logits(&x)?;
    let probs = model.predict(&x)?;
    // A diverged model scores every sample alike.
    let scores: Vec<f64> = probs
        .data()
        .chunks(2)
        .map(|r| if r[1].is_finite() { r[1] } else { 0.5 })
        .collect();
    let c = metrics::confusion(&scores, &data.labels, 0.5)?;
    let defined = |r: CoreResult<f64>| -> CoreResult<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(clstream_core::Error::UndefinedMetric { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let wce = weighted_cross_entropy(&logits, &y, class_weights)?;
    Ok([
        defined(metrics::balanced_accuracy(&c))?,
        defined(metrics::sensitivity(&c))?,
        defined(metrics::specificity(&c))?,
        defined(metrics::precision(&c))?,
        defined(metrics::auroc(&scores, &data.labels))?,
        defined(metrics::auprc(&scores, &data.labels))?,
        wce.is_finite().then_some(wce),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One metric value at one point of one run. `eval_task` is `None` for the
/// mean across all seen tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: usize,
    pub trained_task: usize,
    pub epoch: usize,
    pub split: Split,
    pub eval_task: Option<usize>,
    pub metric: String,
    pub value: Option<f64>,
}

/// Per-task records for tasks `0..=upto` followed by one mean record per
/// metric. Positions index `data`.
pub fn evaluate(
    model: &Model,
    data: &[&TaskDataset],
    class_weights: &[f64],
    coords: (usize, usize, usize),
    split: Split,
) -> CoreResult<Vec<MetricRecord>> {
    let (run, trained_task, epoch) = coords;
    let mut per_task = Vec::with_capacity(data.len());
    for d in data {
        per_task.push(task_metrics(model, d, class_weights)?);
    }
    let record = |eval_task, m: usize, value| MetricRecord {
        run,
        trained_task,
        epoch,
        split,
        eval_task,
        metric: METRIC_NAMES[m].to_string(),
        value,
    };
    let mut out = Vec::with_capacity((data.len() + 1) * METRIC_NAMES.len());
    for (j, vals) in per_task.iter().enumerate() {
        out.extend(vals.iter().enumerate().map(|(m, &v)| record(Some(j), m, v)));
    }
    for m in 0..METRIC_NAMES.len() {
        let vals: Vec<f64> = per_task.iter().filter_map(|v| v[m]).collect();
        let mean = (!vals.is_empty()).then(|| metrics::mean(&vals));
        out.push(record(None, m, mean));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub strategy: StrategyConfig,
    /// Mean validation balanced accuracy on the first two tasks after
    /// training both; `None` when training failed.
    pub score: Option<f64>,
    pub task_scores: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub chosen: StrategyConfig,
    pub candidates: Vec<CandidateScore>,
    /// Split reads per task during the search.
    pub reads_per_task: Vec<usize>,
}

impl TuneOutcome {
    /// Reads of any split of a task past the first two.
    pub fn reads_beyond_tuning_tasks(&self) -> usize {
        self.reads_per_task.iter().skip(TUNING_TASKS).sum()
    }
}

fn score_candidate(
    cfg: &ExperimentConfig,
    stream: &PreparedStream,
    candidate: &StrategyConfig,
    class_weights: [f64; 2],
) -> Result<Vec<Option<f64>>> {
    let mut model = build_model(&cfg.architecture, stream.input_dims(), seed::derive(cfg.master_seed, "tune/init"))?;
    let mut strategy = candidate.build(cfg.buffer_budget, seed::derive(cfg.master_seed, "tune/strategy"), class_weights)?;
    let tc = cfg.train_config();
    for task in 0..TUNING_TASKS {
        let shuffle = seed::derive_indexed(cfg.master_seed, "tune/shuffle", task as u64);
        train_task(&mut model, strategy.as_mut(), task, stream.train(task), &tc, &class_weights, shuffle, |_, _| Ok(()))?;
    }
    (0..TUNING_TASKS)
        .map(|task| Ok(task_metrics(&model, stream.validation(task), &class_weights)?[0]))
        .collect()
}

/// Grid search over the configured strategy's hyperparameters. Each
/// candidate trains from one shared initialization on the first two tasks'
/// training partitions and is scored by the mean balanced accuracy on their
/// validation partitions. Ties keep the earliest candidate.
pub fn tune(cfg: &ExperimentConfig, stream: &PreparedStream) -> Result<TuneOutcome> {
    let candidates = cfg.strategy.candidates()?;
    if stream.len() < TUNING_TASKS {
        return Err(Error::Config(format!("tuning needs 2 tasks, the stream has {}", stream.len())));
    }
    stream.reset_reads();
    let class_weights = stream.class_weights()?;
    let mut scored = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let (task_scores, error) = match score_candidate(cfg, stream, &candidate, class_weights) {
            Ok(s) => (s, None),
            Err(e) if !e.is_config() => {
                log::warn!("candidate {candidate} failed: {e}");
                (vec![None; TUNING_TASKS], Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        let score = if task_scores.iter().all(Option::is_some) {
            Some(metrics::mean(&task_scores.iter().flatten().copied().collect::<Vec<_>>()))
        } else {
            None
        };
        log::info!("tune {candidate}: {score:?}");
        scored.push(CandidateScore {
            strategy: candidate,
            score,
            task_scores,
            error,
        });
    }
    let best = scored
        .iter()
        .filter_map(|c| c.score.map(|s| (s, c)))
        .fold(None, |best: Option<(f64, &CandidateScore)>, (s, c)| match best {
            Some((b, _)) if b >= s => best,
            _ => Some((s, c)),
        })
        .ok_or_else(|| Error::Report("no tuning candidate produced a score".into()))?;
    Ok(TuneOutcome {
        chosen: best.1.strategy.clone(),
        reads_per_task: stream.reads(),
        candidates: scored,
    })
}

/// The outcome of one repetition of the full stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fingerprint: String,
    pub strategy: StrategyConfig,
    pub architecture: ArchitectureSpec,
    pub run: usize,
    pub seed: u64,
    /// Domain values of the consumed tasks, in training order.
    pub tasks: Vec<String>,
    pub class_weights: [f64; 2],
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
    /// Test balanced accuracy at the end of each task.
    pub accuracy: AccuracyMatrix,
    pub final_mean_balanced_accuracy: Option<f64>,
    pub final_forgetting: Option<f64>,
    pub final_forgetting_per_task: Vec<f64>,
    /// Optimization epochs actually run per task.
    pub epochs_per_task: Vec<usize>,
    /// Buffer sizes reported by the strategy at the end of each task.
    pub buffer_sizes: Vec<Vec<usize>>,
    /// Patients present in both a consumed training set and a test set.
    pub leaked_patients: usize,
    pub wall_clock_seconds: f64,
    pub failure: Option<String>,
}

impl RunResult {
    pub fn test_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }
}

struct RunInputs<'a> {
    train: Vec<TaskDataset>,
    test: Vec<&'a TaskDataset>,
    eval_train: Vec<&'a TaskDataset>,
}

fn run_inputs<'a>(stream: &'a PreparedStream, consumed: &[usize]) -> Result<RunInputs<'a>> {
    let mut train = Vec::with_capacity(consumed.len());
    for &t in consumed {
        let parts = [stream.train(t), stream.validation(t)];
        train.push(TaskDataset::concat(&stream.names[t], parts)?.expect("two parts"));
    }
    Ok(RunInputs {
        train,
        test: consumed.iter().map(|&t| stream.test(t)).collect(),
        eval_train: consumed.iter().map(|&t| stream.train(t)).collect(),
    })
}

fn leaked_patients(inputs: &RunInputs) -> usize {
    let train: BTreeSet<i64> = inputs.train.iter().flat_map(|d| d.patient_ids.iter().copied()).collect();
    let test: BTreeSet<i64> = inputs.test.iter().flat_map(|d| d.patient_ids.iter().copied()).collect();
    train.intersection(&test).count()
}

fn execute_run(
    cfg: &ExperimentConfig,
    inputs: &RunInputs,
    dims: (usize, usize),
    hyper: &StrategyConfig,
    out: &mut RunResult,
) -> Result<()> {
    let run_seed = out.seed;
    let mut model = build_model(&cfg.architecture, dims, seed::derive(run_seed, "init"))?;
    let mut strategy = hyper.build(cfg.buffer_budget, seed::derive(run_seed, "strategy"), out.class_weights)?;
    let tc = cfg.train_config();
    let cw = out.class_weights;
    for (pos, train) in inputs.train.iter().enumerate() {
        let shuffle = seed::derive_indexed(run_seed, "shuffle", pos as u64);
        let mut epochs_seen = 0;
        let records = &mut out.records;
        let accuracy = &mut out.accuracy;
        train_task(&mut model, strategy.as_mut(), pos, train, &tc, &cw, shuffle, |epoch, m| {
            epochs_seen += 1;
            let coords = (out.run, pos, epoch);
            let test = evaluate(m, &inputs.test[..=pos], &cw, coords, Split::Test)?;
            if epoch + 1 == tc.epochs {
                for r in test.iter().filter(|r| r.metric == METRIC_NAMES[0]) {
                    if let Some(j) = r.eval_task {
                        accuracy.set(pos, j, r.value)?;
                    }
                }
            }
            records.extend(test);
            if cfg.record_train_metrics {
                records.extend(evaluate(m, &inputs.eval_train[..=pos], &cw, coords, Split::Train)?);
            }
            Ok(())
        })
        .map_err(Error::from)?;
        out.epochs_per_task.push(epochs_seen);
        out.buffer_sizes.push(strategy.buffer_sizes());
    }
    let last = inputs.train.len() - 1;
    let finals: Vec<f64> = (0..=last).filter_map(|j| out.accuracy.get(last, j)).collect();
    out.final_mean_balanced_accuracy = (finals.len() == last + 1).then(|| metrics::mean(&finals));
    if last > 0 {
        if let Ok(f) = metrics::forgetting(&out.accuracy, last) {
            out.final_forgetting = Some(f.mean);
            out.final_forgetting_per_task = f.per_task;
        }
    }
    Ok(())
}

/// Trains `n_runs` fresh models through the stream under `hyper`. A run
/// that fails keeps its partial records and carries the error message; the
/// remaining runs still execute.
pub fn run_experiment(cfg: &ExperimentConfig, stream: &PreparedStream, hyper: &StrategyConfig) -> Result<Vec<RunResult>> {
    hyper.validate()?;
    let class_weights = stream.class_weights()?;
    let consumed = stream.consumed_tasks();
    let inputs = run_inputs(stream, &consumed)?;
    let leaked = leaked_patients(&inputs);
    let fingerprint = cfg.protocol_fingerprint();
    let mut results = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let started = Instant::now();
        let mut out = RunResult {
            fingerprint: fingerprint.clone(),
            strategy: hyper.clone(),
            architecture: cfg.architecture.clone(),
            run,
            seed: seed::derive_indexed(cfg.master_seed, "run", run as u64),
            tasks: consumed.iter().map(|&t| stream.names[t].clone()).collect(),
            class_weights,
            records: Vec::new(),
            accuracy: AccuracyMatrix::new(consumed.len()),
            final_mean_balanced_accuracy: None,
            final_forgetting: None,
            final_forgetting_per_task: Vec::new(),
            epochs_per_task: Vec::new(),
            buffer_sizes: Vec::new(),
            leaked_patients: leaked,
            wall_clock_seconds: 0.0,
            failure: None,
        };
        if let Err(e) = execute_run(cfg, &inputs, stream.input_dims(), hyper, &mut out) {
            if e.is_config() {
                return Err(e);
            }
            log::error!("run {run} of {hyper} failed: {e}");
            out.failure = Some(e.to_string());
        }
        out.wall_clock_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "run {run} of {hyper}: final balanced accuracy {:?}, forgetting {:?}",
            out.final_mean_balanced_accuracy,
            out.final_forgetting
        );
        results.push(out);
    }
    Ok(results)
}
