//! Config-driven training runs on the sparsegrad harnesses: data generation,
//! training loops, metrics, checkpoints, lambda sweeps and method comparisons.

pub mod checkpoint;
pub mod checks;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod output;
pub mod train;

pub use compare::{calibrate_lambda, compare_methods, run_sweep, Aggregation, Calibration, ComparisonTable};
pub use config::{load_config, ExperimentConfig, GenDataConfig, Harness, Method};
pub use error::{ExperimentError, Result};
pub use metrics::{MetricsRecord, SparsityReport};
pub use model::{sparsity_report, Model};
pub use train::{evaluate_model, load_data, run, run_with_data, RunOutput};
