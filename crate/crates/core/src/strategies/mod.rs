//! Continual-learning strategies behind one hook interface.
//!
//! The training loop calls, per task: [`Strategy::before_task`], then
//! [`Strategy::training_set`] once, then per optimizer step
//! [`Strategy::distill_target`], [`Strategy::loss_penalty`],
//! [`Strategy::transform_gradient`] and [`Strategy::per_step_observe`], and
//! finally [`Strategy::after_task`]. Every hook defaults to a no-op.

mod memory;
mod plugins;
mod projection;
mod regularizers;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{distillation_kl, weighted_cross_entropy, GradientVector, ParameterVector, Tensor};
use crate::checkpoint::Checkpoint;
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::{DistillTarget, Model};

pub use memory::{gdumb_quotas, gdumb_rebalance, replay_store, DEFAULT_BUFFER_BUDGET};
pub use plugins::{Agem, Cumulative, Ewc, GDumb, Gem, Lwf, Naive, OnlineEwc, Replay, Si};
pub use projection::{agem_project, gem_project, kkt_residuals, solve_dual_qp, QP_MAX_ITERS, QP_TOLERANCE};
pub use regularizers::{
    compute_fisher, empirical_fisher, ewc_penalty, ewc_penalty_gradient, online_ewc_merge, online_ewc_penalty,
    online_ewc_penalty_gradient, si_consolidate, si_observe, si_penalty, si_penalty_gradient, EwcState,
    OnlineEwcState, SiState, SI_DAMPING,
};

pub trait Strategy {
    fn name(&self) -> &'static str;

    fn before_task(&mut self, _task: usize, _model: &mut Model, _train: &TaskDataset) -> Result<()> {
        Ok(())
    }

    /// Samples to optimize on for this task.
    fn training_set<'a>(&self, _task: usize, train: &'a TaskDataset) -> Result<Cow<'a, TaskDataset>> {
        Ok(Cow::Borrowed(train))
    }

    fn distill_target(&self, _batch: &Tensor) -> Result<Option<DistillTarget>> {
        Ok(None)
    }

    /// Penalty value and gradient at `params`, or `None` when inactive.
    fn loss_penalty(&self, _params: &ParameterVector) -> Result<Option<(f64, GradientVector)>> {
        Ok(None)
    }

    fn transform_gradient(&mut self, _model: &Model, g: GradientVector) -> Result<GradientVector> {
        Ok(g)
    }

    /// Sees the data-loss gradient and the parameter step actually applied.
    fn per_step_observe(&mut self, _data_grad: &GradientVector, _delta: &[f64]) -> Result<()> {
        Ok(())
    }

    fn after_task(&mut self, _task: usize, _model: &Model, _train: &TaskDataset) -> Result<()> {
        Ok(())
    }

    /// Samples currently buffered for each seen task.
    fn buffer_sizes(&self) -> Vec<usize> {
        Vec::new()
    }

    fn checkpoint(&self) -> Result<Checkpoint>;

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()>;
}

pub const STRATEGY_NAMES: &[&str] = &[
    "naive",
    "cumulative",
    "ewc",
    "online_ewc",
    "si",
    "lwf",
    "replay",
    "gdumb",
    "gem",
    "agem",
];

fn default_damping() -> f64 {
    SI_DAMPING
}

fn default_true() -> bool {
    true
}

fn default_sample_size() -> usize {
    DEFAULT_BUFFER_BUDGET
}

fn default_memory_strength() -> f64 {
    0.5
}

/// A strategy and its hyperparameters. Buffer sizes left unset fall back to
/// the experiment's buffer budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Naive,
    Cumulative,
    Ewc {
        ewc_lambda: f64,
    },
    OnlineEwc {
        ewc_lambda: f64,
        decay_factor: f64,
    },
    Si {
        si_lambda: f64,
        #[serde(default = "default_damping")]
        damping: f64,
    },
    Lwf {
        alpha: f64,
        temperature: f64,
    },
    Replay {
        #[serde(default)]
        patterns_per_exp: Option<usize>,
    },
    #[serde(rename = "gdumb")]
    GDumb {
        #[serde(default)]
        mem_size: Option<usize>,
        #[serde(default = "default_true")]
        retrain: bool,
    },
    Gem {
        #[serde(default)]
        patterns_per_exp: Option<usize>,
        #[serde(default = "default_memory_strength")]
        memory_strength: f64,
    },
    Agem {
        #[serde(default)]
        patterns_per_exp: Option<usize>,
        #[serde(default = "default_sample_size")]
        sample_size: usize,
    },
}

impl StrategyConfig {
    /// Builds a config from a strategy name and `key = value` hyperparameters.
    pub fn from_params(name: &str, params: &BTreeMap<String, serde_json::Value>) -> Result<Self> {
        if !STRATEGY_NAMES.contains(&name) {
            return Err(Error::Config(format!(
                "unknown strategy `{name}` (expected one of {})",
                STRATEGY_NAMES.join(", ")
            )));
        }
        let mut obj = serde_json::Map::new();
        obj.insert("name".into(), name.into());
        for (k, v) in params {
            if k == "name" {
                return Err(Error::Config("`name` is not a hyperparameter".into()));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Config(format!("strategy `{name}`: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Cumulative => "cumulative",
            Self::Ewc { .. } => "ewc",
            Self::OnlineEwc { .. } => "online_ewc",
            Self::Si { .. } => "si",
            Self::Lwf { .. } => "lwf",
            Self::Replay { .. } => "replay",
            Self::GDumb { .. } => "gdumb",
            Self::Gem { .. } => "gem",
            Self::Agem { .. } => "agem",
        }
    }

    /// The hyperparameters as a flat map, without the name.
    pub fn params(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.into_iter().filter(|(k, _)| k != "name").collect(),
            _ => BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |what: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be finite and non-negative, got {v}")))
            }
        };
        match self {
            Self::Naive | Self::Cumulative | Self::Replay { .. } | Self::GDumb { .. } => Ok(()),
            Self::Ewc { ewc_lambda } => nonneg("ewc_lambda", *ewc_lambda),
            Self::OnlineEwc {
                ewc_lambda,
                decay_factor,
            } => {
                nonneg("ewc_lambda", *ewc_lambda)?;
                if (0.0..=1.0).contains(decay_factor) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("decay_factor must be in [0, 1], got {decay_factor}")))
                }
            }
            Self::Si { si_lambda, damping } => {
                nonneg("si_lambda", *si_lambda)?;
                if *damping > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("damping must be positive, got {damping}")))
                }
            }
            Self::Lwf { alpha, temperature } => {
                nonneg("alpha", *alpha)?;
                if *temperature > 0.0 && temperature.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("temperature must be positive, got {temperature}")))
                }
            }
            Self::Gem { memory_strength, .. } => nonneg("memory_strength", *memory_strength),
            Self::Agem { .. } => Ok(()),
        }
    }

    /// Instantiates the strategy for one run.
    pub fn build(&self, buffer_budget: usize, run_seed: u64, class_weights: [f64; 2]) -> Result<Box<dyn Strategy>> {
        self.validate()?;
        let or_budget = |b: &Option<usize>| b.unwrap_or(buffer_budget);
        Ok(match self {
            Self::Naive => Box::new(Naive::new(self.clone())),
            Self::Cumulative => Box::new(Cumulative::new(self.clone())),
            Self::Ewc { ewc_lambda } => Box::new(Ewc::new(self.clone(), *ewc_lambda)),
            Self::OnlineEwc {
                ewc_lambda,
                decay_factor,
            } => Box::new(OnlineEwc::new(self.clone(), *ewc_lambda, *decay_factor)?),
            Self::Si { si_lambda, damping } => Box::new(Si::new(self.clone(), *si_lambda, *damping)),
            Self::Lwf { alpha, temperature } => Box::new(Lwf::new(self.clone(), *alpha, *temperature)),
            Self::Replay { patterns_per_exp } => Box::new(Replay::new(self.clone(), or_budget(patterns_per_exp), run_seed)),
            Self::GDumb { mem_size, retrain } => {
                Box::new(GDumb::new(self.clone(), or_budget(mem_size), *retrain, run_seed))
            }
            Self::Gem {
                patterns_per_exp,
                memory_strength,
            } => Box::new(Gem::new(
                self.clone(),
                or_budget(patterns_per_exp),
                *memory_strength,
                run_seed,
                class_weights,
            )),
            Self::Agem {
                patterns_per_exp,
                sample_size,
            } => Box::new(Agem::new(
                self.clone(),
                or_budget(patterns_per_exp),
                *sample_size,
                run_seed,
                class_weights,
            )),
        })
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params().iter().map(|(k, v)| format!("{k}={v}")).collect();
        if params.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}({})", self.name(), params.join(", "))
        }
    }
}

/// Weighted cross-entropy plus `alpha * T^2 * KL(teacher || student)` at
/// temperature `T`. The distillation term is skipped entirely when `alpha`
/// is zero.
pub fn lwf_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
    alpha: f64,
    temperature: f64,
) -> Result<f64> {
    let ce = weighted_cross_entropy(student_logits, labels, class_weights)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    Ok(ce + alpha * distillation_kl(student_logits, teacher_logits, temperature)?)
}
