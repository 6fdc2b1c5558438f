//! Files written by a run: metrics CSV, JSON summary and checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{ExperimentError, Result};
use crate::metrics::{write_csv, MetricsRecord};
use crate::train::RunOutput;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_metrics: MetricsRecord,
    pub checkpoint_path: PathBuf,
    pub seed: u64,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| ExperimentError::io(path, e))
}

/// Write the run's files into `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<RunSummary> {
    ensure_dir(dir)?;
    write_csv(&dir.join(METRICS_FILE), &output.records)?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&output.config, &output.model).save(&checkpoint_path)?;
    let summary = RunSummary {
        config: output.config.clone(),
        final_metrics: output.final_metrics().clone(),
        checkpoint_path,
        seed: output.config.seed,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Record of a failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Diagnostic {
    pub error: String,
    pub numeric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub seed: u64,
}

pub fn write_diagnostic(dir: &Path, config: &ExperimentConfig, error: &ExperimentError) -> Result<()> {
    ensure_dir(dir)?;
    let (epoch, step) = match error {
        ExperimentError::NonFiniteLoss { epoch, step, .. } => (Some(*epoch), Some(*step)),
        _ => (None, None),
    };
    let d = Diagnostic { error: error.to_string(), numeric: error.is_numeric(), epoch, step, seed: config.seed };
    write_json(&dir.join(DIAGNOSTIC_FILE), &d)
}

pub fn write_value<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(path, value)
}
