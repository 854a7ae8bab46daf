//! Quadratic parameter penalties: EWC, Online EWC and Synaptic Intelligence.

use crate::autodiff::{GradientVector, ParameterVector};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Default SI damping.
pub const SI_DAMPING: f64 = 1e-3;

fn check_len(what: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::Usage(format!("{what} has {len} entries, parameters have {expected}")));
    }
    Ok(())
}

/// `coef * sum_i imp_i (theta_i - anchor_i)^2`.
fn quadratic(theta: &[f64], anchor: &[f64], importance: &[f64], coef: f64) -> f64 {
    let s: f64 = theta
        .iter()
        .zip(anchor)
        .zip(importance)
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum();
    coef * s
}

fn quadratic_grad(out: &mut [f64], theta: &[f64], anchor: &[f64], importance: &[f64], coef: f64) {
    for (((o, t), a), f) in out.iter_mut().zip(theta).zip(anchor).zip(importance) {
        *o += 2.0 * coef * f * (t - a);
    }
}

/// Mean over samples of the squared per-sample gradient produced by `grad_of`.
pub fn empirical_fisher(
    n_params: usize,
    n_samples: usize,
    mut grad_of: impl FnMut(usize) -> Result<GradientVector>,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Usage("cannot estimate a Fisher information from zero samples".into()));
    }
    let mut fisher = vec![0.0; n_params];
    for i in 0..n_samples {
        let g = grad_of(i)?;
        check_len("per-sample gradient", g.len(), n_params)?;
        for (f, v) in fisher.iter_mut().zip(g.values()) {
            *f += v * v;
        }
    }
    let n = n_samples as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Empirical Fisher of `model` on `data`: the mean over samples of the squared
/// gradient of `log p(y | x)` at the true label.
pub fn compute_fisher(model: &Model, data: &TaskDataset) -> Result<Vec<f64>> {
    empirical_fisher(model.param_count(), data.len(), |i| {
        let (x, y) = data.batch(&[i])?;
        Ok(model.loss_and_grad(&x, &y, &[1.0, 1.0], None)?.1)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    pub anchors: Vec<ParameterVector>,
    pub fishers: Vec<Vec<f64>>,
}

impl EwcState {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            anchors: Vec::new(),
            fishers: Vec::new(),
        }
    }

    pub fn push(&mut self, anchor: ParameterVector, fisher: Vec<f64>) -> Result<()> {
        check_len("Fisher", fisher.len(), anchor.len())?;
        if let Some(first) = self.anchors.first() {
            if !first.same_layout(&anchor) {
                return Err(Error::Usage("EWC anchor layout changed between tasks".into()));
            }
        }
        self.anchors.push(anchor);
        self.fishers.push(fisher);
        Ok(())
    }

    fn check(&self, theta: &ParameterVector) -> Result<()> {
        for a in &self.anchors {
            if !a.same_layout(theta) {
                return Err(Error::Usage("EWC anchor layout does not match parameters".into()));
            }
        }
        Ok(())
    }
}

/// `sum_tasks (lambda/2) sum_i F_i (theta_i - theta*_i)^2`.
pub fn ewc_penalty(theta: &ParameterVector, state: &EwcState) -> Result<f64> {
    state.check(theta)?;
    Ok(state
        .anchors
        .iter()
        .zip(&state.fishers)
        .map(|(a, f)| quadratic(theta.values(), a.values(), f, state.lambda / 2.0))
        .sum())
}

pub fn ewc_penalty_gradient(theta: &ParameterVector, state: &EwcState) -> Result<GradientVector> {
    state.check(theta)?;
    let mut g = vec![0.0; theta.len()];
    for (a, f) in state.anchors.iter().zip(&state.fishers) {
        quadratic_grad(&mut g, theta.values(), a.values(), f, state.lambda / 2.0);
    }
    Ok(GradientVector::from_values(g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineEwcState {
    pub lambda: f64,
    pub decay: f64,
    pub running_fisher: Option<Vec<f64>>,
    pub anchor: Option<ParameterVector>,
}

impl OnlineEwcState {
    pub fn new(lambda: f64, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("decay_factor must be in [0, 1], got {decay}")));
        }
        Ok(Self {
            lambda,
            decay,
            running_fisher: None,
            anchor: None,
        })
    }

    /// Folds in a new task's Fisher and moves the anchor to `theta`.
    pub fn consolidate(&mut self, theta: ParameterVector, fresh: Vec<f64>) -> Result<()> {
        check_len("Fisher", fresh.len(), theta.len())?;
        let merged = match &self.running_fisher {
            Some(running) => online_ewc_merge(running, &fresh, self.decay)?,
            None => fresh,
        };
        self.running_fisher = Some(merged);
        self.anchor = Some(theta);
        Ok(())
    }
}

/// `gamma * running + fresh`.
pub fn online_ewc_merge(running: &[f64], fresh: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_len("running Fisher", running.len(), fresh.len())?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("decay_factor must be in [0, 1], got {gamma}")));
    }
    Ok(running.iter().zip(fresh).map(|(r, f)| gamma * r + f).collect())
}

pub fn online_ewc_penalty(theta: &ParameterVector, state: &OnlineEwcState) -> Result<f64> {
    match (&state.anchor, &state.running_fisher) {
        (Some(a), Some(f)) => {
            if !a.same_layout(theta) {
                return Err(Error::Usage("Online EWC anchor layout does not match parameters".into()));
            }
            Ok(quadratic(theta.values(), a.values(), f, state.lambda / 2.0))
        }
        _ => Ok(0.0),
    }
}

pub fn online_ewc_penalty_gradient(theta: &ParameterVector, state: &OnlineEwcState) -> Result<GradientVector> {
    let mut g = vec![0.0; theta.len()];
    if let (Some(a), Some(f)) = (&state.anchor, &state.running_fisher) {
        if !a.same_layout(theta) {
            return Err(Error::Usage("Online EWC anchor layout does not match parameters".into()));
        }
        quadratic_grad(&mut g, theta.values(), a.values(), f, state.lambda / 2.0);
    }
    Ok(GradientVector::from_values(g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiState {
    pub strength: f64,
    pub damping: f64,
    /// Path integral accumulated over the current task.
    pub omega: Vec<f64>,
    /// Consolidated importance.
    pub importance: Vec<f64>,
    pub task_start: Vec<f64>,
    pub anchor: Option<ParameterVector>,
}

impl SiState {
    pub fn new(strength: f64, damping: f64, n_params: usize) -> Result<Self> {
        if !(damping > 0.0) {
            return Err(Error::Config(format!("SI damping must be positive, got {damping}")));
        }
        Ok(Self {
            strength,
            damping,
            omega: vec![0.0; n_params],
            importance: vec![0.0; n_params],
            task_start: vec![0.0; n_params],
            anchor: None,
        })
    }

    /// Resets the path integral and records where the task starts.
    pub fn begin_task(&mut self, theta: &ParameterVector) -> Result<()> {
        check_len("SI state", self.omega.len(), theta.len())?;
        self.omega.iter_mut().for_each(|w| *w = 0.0);
        self.task_start.copy_from_slice(theta.values());
        Ok(())
    }
}

/// `omega += (-g) * delta` for one optimizer step.
pub fn si_observe(state: &mut SiState, g: &GradientVector, delta: &[f64]) -> Result<()> {
    check_len("gradient", g.len(), state.omega.len())?;
    check_len("step", delta.len(), state.omega.len())?;
    for ((w, gi), d) in state.omega.iter_mut().zip(g.values()).zip(delta) {
        *w -= gi * d;
    }
    Ok(())
}

/// `Omega += omega / ((theta_end - theta_start)^2 + xi)`, with negative
/// contributions dropped so the importance stays non-negative. Resets omega
/// and moves the anchor to `theta_end`.
pub fn si_consolidate(state: &mut SiState, theta_end: &ParameterVector) -> Result<()> {
    check_len("parameters", theta_end.len(), state.omega.len())?;
    for (((imp, w), end), start) in state
        .importance
        .iter_mut()
        .zip(&state.omega)
        .zip(theta_end.values())
        .zip(&state.task_start)
    {
        let delta = end - start;
        *imp += (w / (delta * delta + state.damping)).max(0.0);
    }
    state.omega.iter_mut().for_each(|w| *w = 0.0);
    state.anchor = Some(theta_end.clone());
    Ok(())
}

/// `c * sum_i Omega_i (theta_i - theta*_i)^2`.
pub fn si_penalty(theta: &ParameterVector, state: &SiState) -> Result<f64> {
    match &state.anchor {
        Some(a) => {
            check_len("SI anchor", a.len(), theta.len())?;
            Ok(quadratic(theta.values(), a.values(), &state.importance, state.strength))
        }
        None => Ok(0.0),
    }
}

pub fn si_penalty_gradient(theta: &ParameterVector, state: &SiState) -> Result<GradientVector> {
    let mut g = vec![0.0; theta.len()];
    if let Some(a) = &state.anchor {
        check_len("SI anchor", a.len(), theta.len())?;
        quadratic_grad(&mut g, theta.values(), a.values(), &state.importance, state.strength);
    }
    Ok(GradientVector::from_values(g))
}
