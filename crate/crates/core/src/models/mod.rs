//! Desk-scale harnesses: gated channels, neural wiring, and a GCN with a
//! learnable shared adjacency.

pub mod channel;
pub mod gcn;
pub mod init;
pub mod metrics;
pub mod wiring;

use serde::{Deserialize, Serialize};

use crate::sparse_param::GradMode;

/// How a harness turns architecture parameters into gate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateParam {
    /// Signed thresholded parameterization.
    Sparse(GradMode),
    /// Gates are free parameters, for proximal baselines.
    Free,
}

/// Batch statistics during training, running statistics during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}
