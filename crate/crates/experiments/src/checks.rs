//! Numerical self-checks behind the `grad-check`, `prox-check` and
//! `sinkhorn-check` commands.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sparsegrad::gradcheck;
use sparsegrad::normalization::{balanced_normalize, sinkhorn, stochastic_deviation, EVAL_MAX_ITERS, EVAL_TOL};
use sparsegrad::proximal::{prox_oracle_check, ProxKind, ProxSpec};
use sparsegrad::regularizers::Grouping;
use sparsegrad::Tensor64;

use crate::data::{rng_for, Stream};
use crate::error::Result;

pub const GRAD_POINTS: usize = 100;
pub const PROX_INSTANCES: usize = 50;
pub const PROX_TOLERANCE: f64 = 1e-3;
pub const SINKHORN_MATRICES: usize = 50;
pub const SINKHORN_MAX_SIZE: usize = 10;
/// Allowed gap between the normalizations of `m` and `c * m`.
pub const SCALE_TOLERANCE: f64 = 1e-6;

/// Worst case of one check over its instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CheckLine {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

pub fn all_passed(lines: &[CheckLine]) -> bool {
    lines.iter().all(CheckLine::passed)
}

/// Finite-difference check of every differentiable op and gate composite.
pub fn grad_check(points: usize, seed: u64) -> Result<Vec<CheckLine>> {
    Ok(gradcheck::run_suite(points, seed)?
        .into_iter()
        .map(|e| CheckLine {
            name: e.name.to_string(),
            cases: e.points,
            worst: e.max_error,
            tolerance: gradcheck::TOLERANCE,
        })
        .collect())
}

/// Closed-form prox against a grid-search minimizer on random one- and
/// two-member groups.
pub fn prox_check(instances: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = rng_for(seed, Stream::Data);
    [ProxKind::L1, ProxKind::GroupL21, ProxKind::ExclusiveL12]
        .into_iter()
        .map(|kind| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let dim = 1 + i % 2;
                let w = Tensor64::vector((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())?;
                let spec = ProxSpec::new(kind, rng.random_range(0.1..2.0), rng.random_range(0.05..1.0))
                    .with_grouping(Grouping::single(dim));
                worst = worst.max(prox_oracle_check(&spec, &w)?);
            }
            Ok(CheckLine {
                name: serde_json::to_value(kind)?.as_str().unwrap_or("prox").to_string(),
                cases: instances,
                worst,
                tolerance: PROX_TOLERANCE,
            })
        })
        .collect()
}

fn max_abs_diff(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Line sums and scale invariance of both normalizers on random positive
/// matrices of size up to [`SINKHORN_MAX_SIZE`].
pub fn sinkhorn_check(matrices: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = rng_for(seed, Stream::Data);
    let mut worst = [0.0f64; 4];
    for _ in 0..matrices {
        let n = rng.random_range(1..=SINKHORN_MAX_SIZE);
        let m = Tensor64::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0.1..2.0)).collect())?;
        let factor: f64 = rng.random_range(0.1..10.0);
        let scaled = m.map(|v| v * factor);
        for (k, normalize) in [sinkhorn::<f64>, balanced_normalize::<f64>].into_iter().enumerate() {
            let a = normalize(&m, EVAL_TOL, EVAL_MAX_ITERS)?.values;
            let b = normalize(&scaled, EVAL_TOL, EVAL_MAX_ITERS)?.values;
            worst[k] = worst[k].max(stochastic_deviation(&a));
            worst[k + 2] = worst[k + 2].max(max_abs_diff(&a, &b));
        }
    }
    let line =
        |name: &str, worst: f64, tolerance: f64| CheckLine { name: name.into(), cases: matrices, worst, tolerance };
    Ok(vec![
        line("sinkhorn-line-sums", worst[0], EVAL_TOL),
        line("balanced-line-sums", worst[1], EVAL_TOL),
        line("sinkhorn-scale-invariance", worst[2], SCALE_TOLERANCE),
        line("balanced-scale-invariance", worst[3], SCALE_TOLERANCE),
    ])
}
