//! SGD and the per-task training loop that drives strategy hooks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, ParameterVector};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::seed;
use crate::strategies::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Plain SGD, optionally with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update and returns the step actually taken.
    pub fn step(&mut self, params: &mut ParameterVector, grad: &GradientVector) -> Result<Vec<f64>> {
        grad.check_aligned(params)?;
        let delta: Vec<f64> = if self.momentum == 0.0 {
            grad.values().iter().map(|g| -self.learning_rate * g).collect()
        } else {
            if self.velocity.len() != grad.len() {
                self.velocity = vec![0.0; grad.len()];
            }
            for (v, g) in self.velocity.iter_mut().zip(grad.values()) {
                *v = self.momentum * *v + g;
            }
            self.velocity.iter().map(|v| -self.learning_rate * v).collect()
        };
        for (p, d) in params.values_mut().iter_mut().zip(&delta) {
            *p += d;
        }
        Ok(delta)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskTrainingStats {
    pub epochs: usize,
    pub steps: usize,
    pub samples_seen: usize,
    /// Mean training loss (data term plus penalty) of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` on one task under `strategy` for exactly `cfg.epochs`
/// epochs, calling `on_epoch(epoch, model)` after each. Batches come from a
/// fresh permutation per epoch drawn from `shuffle_seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut Model,
    strategy: &mut dyn Strategy,
    task_index: usize,
    train: &TaskDataset,
    cfg: &TrainConfig,
    class_weights: &[f64],
    shuffle_seed: u64,
    mut on_epoch: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TaskTrainingStats> {
    cfg.validate()?;
    strategy.before_task(task_index, model, train)?;
    let data = strategy.training_set(task_index, train)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut stats = TaskTrainingStats::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_indexed(shuffle_seed, "epoch", epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let distill = strategy.distill_target(&x)?;
            let (loss, data_grad) = model.loss_and_grad(&x, &y, class_weights, distill.as_ref())?;
            let mut grad = data_grad.clone();
            let mut total = loss;
            if let Some((penalty, pg)) = strategy.loss_penalty(model.params())? {
                grad.add_scaled(1.0, pg.values());
                total += penalty;
            }
            let grad = strategy.transform_gradient(model, grad)?;
            let delta = sgd.step(model.params_mut(), &grad)?;
            strategy.per_step_observe(&data_grad, &delta)?;
            loss_sum += total;
            batches += 1;
            stats.steps += 1;
            stats.samples_seen += chunk.len();
        }
        stats.epoch_losses.push(if batches > 0 { loss_sum / batches as f64 } else { f64::NAN });
        stats.epochs += 1;
        on_epoch(epoch, model)?;
    }
    strategy.after_task(task_index, model, train)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn sgd_step_is_minus_lr_times_gradient() {
        let mut p = ParameterVector::flatten(vec![("w".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]).unwrap();
        let g = GradientVector::from_values(vec![0.5, -1.0]);
        let d = Sgd::new(0.1, 0.0).step(&mut p, &g).unwrap();
        assert_eq!(d, vec![-0.05, 0.1]);
        assert_eq!(p.values(), &[0.95, 2.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = ParameterVector::flatten(vec![("w".into(), Tensor::new(vec![1], vec![0.0]).unwrap())]).unwrap();
        let g = GradientVector::from_values(vec![1.0]);
        let mut sgd = Sgd::new(1.0, 0.5);
        sgd.step(&mut p, &g).unwrap();
        let d = sgd.step(&mut p, &g).unwrap();
        assert_eq!(d, vec![-1.5]);
    }
}
