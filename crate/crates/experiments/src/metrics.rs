//! Per-epoch measurements and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the metrics CSV. Errors are classification error rates for
/// the channel and wiring harnesses and MAPE for the GCN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean prediction loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub eval_error: f64,
    pub test_error: f64,
    /// Fraction of exactly-zero gates, edges or adjacency entries.
    pub sparsity_rate: f64,
    pub nonzero_count: usize,
    /// Gates, edges or adjacency entries in total.
    pub total_count: usize,
    /// Parameters left after deleting dead units.
    pub remaining_parameters: usize,
    /// GCN only.
    pub lr_score_k1: Option<f64>,
    /// GCN only.
    pub lr_score_k2: Option<f64>,
    /// Groups whose members are all zero (adjacency rows and columns for the GCN).
    pub degenerate_group_count: usize,
}

/// Column order of the CSV, fixed.
pub const CSV_HEADER: [&str; 11] = [
    "epoch",
    "train-loss",
    "eval-error",
    "test-error",
    "sparsity-rate",
    "nonzero-count",
    "total-count",
    "remaining-parameters",
    "lr-score-k1",
    "lr-score-k2",
    "degenerate-group-count",
];

/// Counts behind the sparsity columns of a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SparsityReport {
    pub sparsity_rate: f64,
    pub nonzero_count: usize,
    pub total_count: usize,
    pub remaining_parameters: usize,
    pub degenerate_group_count: usize,
}

impl SparsityReport {
    /// From the gate values of each group.
    pub fn from_groups<'a>(groups: impl IntoIterator<Item = &'a [f64]>, remaining_parameters: usize) -> Self {
        let mut total = 0;
        let mut zeros = 0;
        let mut degenerate = 0;
        for g in groups {
            let z = g.iter().filter(|v| **v == 0.0).count();
            total += g.len();
            zeros += z;
            degenerate += usize::from(!g.is_empty() && z == g.len());
        }
        SparsityReport {
            sparsity_rate: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
            nonzero_count: total - zeros,
            total_count: total,
            remaining_parameters,
            degenerate_group_count: degenerate,
        }
    }
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.eval_error.to_string(),
            r.test_error.to_string(),
            r.sparsity_rate.to_string(),
            r.nonzero_count.to_string(),
            r.total_count.to_string(),
            r.remaining_parameters.to_string(),
            opt(r.lr_score_k1),
            opt(r.lr_score_k2),
            r.degenerate_group_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| crate::error::ExperimentError::io(path, e))?;
    Ok(())
}
