//! Binary classification and continual-learning metrics.
//!
//! Everything here is a pure function of its inputs. Metrics that are not
//! defined for the given labels (e.g. sensitivity with no positives) return
//! [`Error::UndefinedMetric`] instead of a silent default.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn undefined(metric: &'static str, reason: impl Into<String>) -> Error {
    Error::UndefinedMetric {
        metric,
        reason: reason.into(),
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Tallies predictions where a sample is called positive iff its class-1
/// score is `>= threshold` (ties go to the positive class).
pub fn confusion(positive_scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(positive_scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in positive_scores.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(undefined("sensitivity", "no positive labels"));
    }
    Ok(c.tp as f64 / (c.tp + c.fn_) as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    if c.tn + c.fp == 0 {
        return Err(undefined("specificity", "no negative labels"));
    }
    Ok(c.tn as f64 / (c.tn + c.fp) as f64)
}

pub fn precision(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fp == 0 {
        return Err(undefined("precision", "no positive predictions"));
    }
    Ok(c.tp as f64 / (c.tp + c.fp) as f64)
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    let sens = sensitivity(c).map_err(|_| undefined("balanced_accuracy", "no positive labels"))?;
    let spec = specificity(c).map_err(|_| undefined("balanced_accuracy", "no negative labels"))?;
    Ok((sens + spec) / 2.0)
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve via the Mann-Whitney statistic with mid-ranks,
/// i.e. `P(score_pos > score_neg) + P(tie) / 2`.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(undefined("auroc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps mid-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u64;
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_mid * group_pos;
        i = j;
    }
    let pos_u = pos as u64;
    let twice_u = twice_rank_sum - pos_u * (pos_u + 1);
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Step-interpolated area under the precision-recall curve (average
/// precision), sweeping every distinct score as a threshold.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(undefined("auprc", "no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        area += (tp - prev_tp) as f64 / pos as f64 * precision;
        prev_tp = tp;
        i = j;
    }
    Ok(area)
}

/// `a[i][j]`: balanced accuracy on task `j` after training task `i` (`j <= i`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            rows: (0..n_tasks).map(|i| vec![None; i + 1]).collect(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, trained: usize, evaluated: usize, value: Option<f64>) -> Result<()> {
        if evaluated > trained || trained >= self.rows.len() {
            return Err(Error::Usage(format!(
                "accuracy matrix entry ({trained}, {evaluated}) is outside the lower triangle of {} tasks",
                self.rows.len()
            )));
        }
        if let Some(v) = value {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
            }
        }
        self.rows[trained][evaluated] = value;
        Ok(())
    }

    pub fn get(&self, trained: usize, evaluated: usize) -> Option<f64> {
        self.rows.get(trained)?.get(evaluated).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// `F_j` for every previous task `j < i`.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

/// Forgetting after task `i`: for each `j < i`, the best accuracy on `j` at
/// any checkpoint `k <= i` minus the accuracy after task `i`.
pub fn forgetting(m: &AccuracyMatrix, i: usize) -> Result<Forgetting> {
    if i == 0 {
        return Err(undefined("forgetting", "no previous tasks after the first"));
    }
    if i >= m.n_tasks() {
        return Err(Error::Usage(format!("task {i} beyond the {} recorded", m.n_tasks())));
    }
    let mut per_task = Vec::with_capacity(i);
    for j in 0..i {
        let last = m
            .get(i, j)
            .ok_or_else(|| undefined("forgetting", format!("a[{i}][{j}] missing")))?;
        let best = (j..=i)
            .filter_map(|k| m.get(k, j))
            .fold(f64::NEG_INFINITY, f64::max);
        per_task.push(best - last);
    }
    let mean = mean(&per_task);
    Ok(Forgetting { per_task, mean })
}

/// Arithmetic mean, computed as offsets from the first element so that a
/// constant sequence averages to exactly that constant.
pub fn mean(values: &[f64]) -> f64 {
    match values.first() {
        None => f64::NAN,
        Some(&first) => {
            first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile bootstrap interval of the mean from `resamples` resamples.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(undefined("bootstrap_ci", format!("needs at least 2 values, got {}", values.len())));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Usage(format!(
            "bootstrap needs level in (0, 1) and at least one resample, got {level} and {resamples}"
        )));
    }
    let mut rng = seed::rng(seed);
    let n = values.len();
    let mut buf = vec![0.0; n];
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.gen_range(0..n)];
            }
            mean(&buf)
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&means, alpha), quantile_sorted(&means, 1.0 - alpha)))
}
