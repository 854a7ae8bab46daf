//! Continual-learning engine for multivariate clinical-style time series.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod strategies;
pub mod training;

pub use error::{Error, Result};
