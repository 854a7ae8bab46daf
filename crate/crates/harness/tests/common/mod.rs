#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use clstream_core::autodiff::Nonlinearity;
use clstream_core::models::{ArchitectureKind, ArchitectureSpec};
use clstream_harness::config::{CurriculumConfig, DatasetSource, ExperimentConfig, StrategyGrid, SweepConfig};

pub fn grid(name: &str, pairs: &[(&str, Vec<serde_json::Value>)]) -> StrategyGrid {
    StrategyGrid {
        name: name.into(),
        grid: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
    }
}

/// An experiment on the strong-shift profile with a small MLP.
pub fn strong_shift(strategy: StrategyGrid, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::profile("strong-shift", 0),
        domain_key: "domain".into(),
        curriculum: CurriculumConfig::default(),
        architecture: ArchitectureSpec::new(ArchitectureKind::Mlp, 1, 16, Nonlinearity::Relu),
        strategy,
        epochs_per_task: 40,
        batch_size: 64,
        learning_rate: 0.01,
        momentum: 0.0,
        n_runs: 5,
        buffer_budget: 256,
        output_dir: out.to_path_buf(),
        master_seed: 0,
        record_train_metrics: false,
        sweep: SweepConfig::default(),
    }
}

/// A reduced strong-shift experiment for protocol checks.
pub fn small(strategy: StrategyGrid, out: &Path) -> ExperimentConfig {
    let mut c = strong_shift(strategy, out);
    c.dataset.n_patients = Some(300);
    c.dataset.timesteps = Some(8);
    c.architecture.hidden_dim = 8;
    c.epochs_per_task = 3;
    c.batch_size = 16;
    c.n_runs = 2;
    c
}
