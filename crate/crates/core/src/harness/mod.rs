//! Experiment driver: configuration, data, training, evaluation, reports.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod methods;
pub mod seed;
pub mod train;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, EvalReport};
