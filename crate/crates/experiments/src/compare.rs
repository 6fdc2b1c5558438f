//! Lambda sweeps, lambda calibration and method comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Harness, Method};
use crate::error::{ExperimentError, Result};
use crate::train::{load_data, run, run_with_data, RunOutput};

/// Train once per lambda of `config.sweep`, in parallel, on one dataset.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    config.validate()?;
    if config.sweep.is_empty() {
        return Err(ExperimentError::Config("sweep is empty".into()));
    }
    let data = load_data(config)?;
    config.sweep.par_iter().map(|&lambda| run_with_data(&config.with_lambda(lambda), &data)).collect()
}

/// Result of searching lambda for a target nonzero count.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub lambda: f64,
    pub output: RunOutput,
    /// `(lambda, final nonzero count)` of every trial, in order.
    pub trials: Vec<(f64, usize)>,
    /// Whether the final count is within the tolerance.
    pub matched: bool,
}

/// Bisection in `log(lambda)` over `[low, high]` for a final nonzero count
/// within `tolerance` (relative) of `target`. Assumes the count falls as
/// lambda grows; returns the closest trial when the budget runs out.
pub fn calibrate_lambda(
    config: &ExperimentConfig,
    target: usize,
    tolerance: f64,
    (low, high): (f64, f64),
    max_trials: usize,
) -> Result<Calibration> {
    if !(low > 0.0 && high > low) || max_trials == 0 {
        return Err(ExperimentError::Config(format!("invalid calibration bracket [{low}, {high}]")));
    }
    config.validate()?;
    let data = load_data(config)?;
    let (mut lo, mut hi) = (low.ln(), high.ln());
    let mut trials = Vec::new();
    let mut best: Option<(f64, f64, RunOutput)> = None;
    for _ in 0..max_trials {
        let lambda = (0.5 * (lo + hi)).exp();
        let out = run_with_data(&config.with_lambda(lambda), &data)?;
        let count = out.final_metrics().nonzero_count;
        trials.push((lambda, count));
        let miss = (count as f64 - target as f64) / target.max(1) as f64;
        if miss > tolerance {
            lo = lambda.ln();
        } else if miss < -tolerance {
            hi = lambda.ln();
        }
        let closer = best.as_ref().is_none_or(|(_, m, _)| miss.abs() < m.abs());
        if closer {
            best = Some((lambda, miss, out));
        }
        if miss.abs() <= tolerance {
            break;
        }
    }
    let (lambda, miss, output) = best.expect("at least one trial");
    Ok(Calibration { lambda, output, trials, matched: miss.abs() <= tolerance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Median,
    Mean,
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComparisonRow {
    pub method: Method,
    pub lambda: f64,
    pub runs: usize,
    pub sparsity_rate: f64,
    pub nonzero_count: f64,
    pub eval_error: f64,
    pub test_error: f64,
    pub lr_score_k1: Option<f64>,
    pub lr_score_k2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ComparisonTable {
    pub harness: Harness,
    /// How the per-seed final metrics were combined.
    pub aggregation: Aggregation,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Train every config on every seed and aggregate the final metrics per
/// config. An empty `seeds` uses each config's own seed.
pub fn compare_methods(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    aggregation: Aggregation,
) -> Result<ComparisonTable> {
    if configs.len() < 2 {
        return Err(ExperimentError::Config("comparison needs at least two configs".into()));
    }
    let harness = configs[0].harness;
    if let Some(c) = configs.iter().find(|c| c.harness != harness) {
        return Err(ExperimentError::Config(format!("mismatched harnesses {harness:?} and {:?}", c.harness)));
    }
    let cells: Vec<(usize, ExperimentConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let per_seed: Vec<ExperimentConfig> =
                if seeds.is_empty() { vec![c.clone()] } else { seeds.iter().map(|&s| c.with_seed(s)).collect() };
            per_seed.into_iter().map(move |c| (i, c))
        })
        .collect();
    let outputs: Vec<(usize, RunOutput)> =
        cells.par_iter().map(|(i, c)| run(c).map(|o| (*i, o))).collect::<Result<_>>()?;
    let rows = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let finals: Vec<_> = outputs.iter().filter(|(j, _)| *j == i).map(|(_, o)| o.final_metrics()).collect();
            let agg = |f: &dyn Fn(&crate::metrics::MetricsRecord) -> f64| {
                aggregation.apply(&finals.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let lr = |k1: bool| {
                let v: Option<Vec<f64>> =
                    finals.iter().map(|r| if k1 { r.lr_score_k1 } else { r.lr_score_k2 }).collect();
                v.map(|v| aggregation.apply(&v))
            };
            ComparisonRow {
                method: c.method,
                lambda: c.lambda(),
                runs: finals.len(),
                sparsity_rate: agg(&|r| r.sparsity_rate),
                nonzero_count: agg(&|r| r.nonzero_count as f64),
                eval_error: agg(&|r| r.eval_error),
                test_error: agg(&|r| r.test_error),
                lr_score_k1: lr(true),
                lr_score_k2: lr(false),
            }
        })
        .collect();
    let seeds = if seeds.is_empty() { configs.iter().map(|c| c.seed).collect() } else { seeds.to_vec() };
    Ok(ComparisonTable { harness, aggregation, seeds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsegrad::regularizers::{RegularizerKind, RegularizerSpec};

    #[test]
    fn aggregations() {
        assert_eq!(Aggregation::Median.apply(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(Aggregation::Median.apply(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(Aggregation::Mean.apply(&[1.0, 2.0, 6.0]), 3.0);
    }

    #[test]
    fn mismatched_harnesses_are_rejected() {
        let spec = RegularizerSpec::new(RegularizerKind::L1, 0.1);
        let a = ExperimentConfig::new(Harness::Channel, Method::DsExact, spec.clone());
        let b = ExperimentConfig::new(Harness::Wiring, Method::DsExact, spec);
        assert!(matches!(compare_methods(&[a.clone(), b], &[], Aggregation::Mean), Err(ExperimentError::Config(_))));
        assert!(compare_methods(&[a], &[], Aggregation::Mean).is_err());
    }
}
