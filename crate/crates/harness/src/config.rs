//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clstream_core::datagen::{self, CohortDataset, ShiftProfile, TaskOrder};
use clstream_core::models::ArchitectureSpec;
use clstream_core::seed;
use clstream_core::strategies::{StrategyConfig, DEFAULT_BUFFER_BUDGET};
use clstream_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_RUNS: usize = 5;

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_runs() -> usize {
    DEFAULT_RUNS
}
fn default_budget() -> usize {
    DEFAULT_BUFFER_BUDGET
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// Where the cohort comes from: a named synthetic profile (optionally
/// resized) or a dataset directory written by `generate-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generation seed for profiles.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_patients: Option<usize>,
    #[serde(default)]
    pub timesteps: Option<usize>,
}

impl DatasetSource {
    pub fn profile(name: &str, seed: u64) -> Self {
        Self {
            profile: Some(name.into()),
            path: None,
            seed,
            n_patients: None,
            timesteps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.profile, &self.path) {
            (Some(_), None) => Ok(()),
            (None, Some(_)) if self.n_patients.is_none() && self.timesteps.is_none() => Ok(()),
            (None, Some(_)) => Err(Error::Config("n_patients/timesteps only apply to generated profiles".into())),
            _ => Err(Error::Config("dataset needs exactly one of `profile` or `path`".into())),
        }
    }

    pub fn resolved_profile(&self) -> Result<Option<ShiftProfile>> {
        let Some(name) = &self.profile else { return Ok(None) };
        let mut p = ShiftProfile::preset(name)?;
        if let Some(n) = self.n_patients {
            p.n_patients = n;
        }
        if let Some(t) = self.timesteps {
            p.timesteps = t;
        }
        p.validate()?;
        Ok(Some(p))
    }

    pub fn load(&self) -> Result<CohortDataset> {
        self.validate()?;
        match (self.resolved_profile()?, &self.path) {
            (Some(p), _) => Ok(datagen::generate_cohort(&p, self.seed)?),
            (None, Some(dir)) => Ok(datagen::load_dataset(dir)?),
            (None, None) => unreachable!("validated above"),
        }
    }
}

/// Task ordering: an explicit list of domain values, or a shuffle seed.
/// With neither, the order is shuffled with a seed derived from the master
/// seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub order: Option<Vec<String>>,
}

impl CurriculumConfig {
    pub fn task_order(&self, master_seed: u64) -> Result<TaskOrder> {
        match (&self.order, self.seed) {
            (Some(_), Some(_)) => Err(Error::Config("curriculum takes `order` or `seed`, not both".into())),
            (Some(o), None) => Ok(TaskOrder::Curriculum(o.clone())),
            (None, Some(s)) => Ok(TaskOrder::Random(s)),
            (None, None) => Ok(TaskOrder::Random(seed::derive(master_seed, "curriculum"))),
        }
    }
}

/// A strategy name and the candidate values of each hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyGrid {
    pub name: String,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<serde_json::Value>>,
}

impl StrategyGrid {
    /// Every point of the grid, in lexicographic key order with the last key
    /// varying fastest.
    pub fn candidates(&self) -> Result<Vec<StrategyConfig>> {
        if let Some((k, _)) = self.grid.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("grid for `{}` has no values for `{k}`", self.name)));
        }
        let mut points: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
        for (k, values) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut p = p.clone();
                        p.insert(k.clone(), v.clone());
                        p
                    })
                })
                .collect();
        }
        points
            .iter()
            .map(|p| StrategyConfig::from_params(&self.name, p).map_err(Error::from))
            .collect()
    }
}

/// Values for `sweep`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub buffer_budget: Vec<usize>,
    #[serde(default)]
    pub curriculum: Vec<CurriculumConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub domain_key: String,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    pub architecture: ArchitectureSpec,
    pub strategy: StrategyGrid,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// Samples stored per task by Replay, GEM and A-GEM, and in total by
    /// GDumb, unless the strategy sets its own.
    #[serde(default = "default_budget")]
    pub buffer_budget: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    /// Also evaluate every seen task's training partition after each epoch.
    #[serde(default)]
    pub record_train_metrics: bool,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.architecture.validate()?;
        self.train_config().validate()?;
        self.curriculum.task_order(self.master_seed)?;
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be at least 1".into()));
        }
        if self.domain_key.is_empty() {
            return Err(Error::Config("domain_key is empty".into()));
        }
        self.strategy.candidates()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_per_task,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    /// Hash of everything that must match for two experiments to be
    /// compared side by side: data, tasks, optimizer, seeds and budgets.
    /// Strategy, architecture and output location are left out.
    pub fn protocol_fingerprint(&self) -> String {
        let protocol = serde_json::json!({
            "dataset": self.dataset,
            "domain_key": self.domain_key,
            "curriculum": self.curriculum,
            "epochs_per_task": self.epochs_per_task,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "n_runs": self.n_runs,
            "buffer_budget": self.buffer_budget,
            "master_seed": self.master_seed,
            "record_train_metrics": self.record_train_metrics,
        });
        let digest = Sha256::digest(protocol.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
