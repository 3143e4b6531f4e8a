//! Configuration parsing and experiment orchestration behind the binary.

pub mod config;
pub mod experiment;

pub use config::{parse_config, ConfigError, DatasetSpec, ExperimentConfig};
pub use experiment::{compare_suite, metrics_csv, run_experiment, ExperimentError};
