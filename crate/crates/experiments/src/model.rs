//! Harness models built from a config, with their sparsity accounting.

use sparsegrad::models::channel::GatedChannelNet;
use sparsegrad::models::gcn::{AdjacencySource, GcnModel, GcnShape};
use sparsegrad::models::wiring::WiringNet;
use sparsegrad::models::GateParam;
use sparsegrad::normalization::{empty_line_count, StrengthMap};
use sparsegrad::optim::ParamStore;
use sparsegrad::sparse_param::GradMode;
use sparsegrad::Tensor64;

use crate::config::{ExperimentConfig, Harness, Method};
use crate::data::{rng_for, Dataset, LabeledData, Stream, TrafficData};
use crate::error::{ExperimentError, Result};
use crate::metrics::SparsityReport;

#[derive(Debug, Clone)]
pub enum Model {
    Channel(GatedChannelNet<f64>),
    Wiring(WiringNet<f64>),
    Gcn(GcnModel<f64>),
}

impl Model {
    pub fn params(&self) -> &ParamStore<f64> {
        match self {
            Model::Channel(m) => &m.params,
            Model::Wiring(m) => &m.params,
            Model::Gcn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        match self {
            Model::Channel(m) => &mut m.params,
            Model::Wiring(m) => &mut m.params,
            Model::Gcn(m) => &mut m.params,
        }
    }
}

fn gate_param(method: Method) -> GateParam {
    match method {
        Method::DsExact => GateParam::Sparse(GradMode::Exact),
        Method::DsRectified => GateParam::Sparse(GradMode::Rectified),
        _ => GateParam::Free,
    }
}

fn labeled(data: &Dataset) -> Result<&LabeledData> {
    match data {
        Dataset::Labeled(d) => Ok(d),
        Dataset::Traffic(_) => Err(ExperimentError::Config("harness needs a labeled dataset".into())),
    }
}

fn traffic(data: &Dataset) -> Result<&TrafficData> {
    match data {
        Dataset::Traffic(d) => Ok(d),
        Dataset::Labeled(_) => Err(ExperimentError::Config("gcn harness needs a traffic dataset".into())),
    }
}

/// `1 / degree` on the true support.
pub fn row_normalized(adjacency: &Tensor64) -> Tensor64 {
    let sums = adjacency.row_sums();
    let n = adjacency.cols();
    let data =
        adjacency.data().iter().enumerate().map(|(k, &v)| if v == 0.0 { 0.0 } else { v / sums[k / n] }).collect();
    Tensor64::new(adjacency.shape().to_vec(), data).expect("finite entries")
}

/// Initial threshold that puts every uniform entry at half strength.
pub fn half_strength_beta(nodes: usize) -> f64 {
    -((4 * nodes - 1) as f64).ln()
}

fn gcn_source(config: &ExperimentConfig, data: &TrafficData) -> Result<AdjacencySource<f64>> {
    let g = &config.model.gcn;
    Ok(match config.method {
        Method::DsExact | Method::DsRectified => {
            if g.strength == StrengthMap::Linear && g.init_alpha <= 0.0 {
                return Err(ExperimentError::Config("linear strengths need a positive init-alpha".into()));
            }
            let grad_mode = if config.method == Method::DsExact { GradMode::Exact } else { GradMode::Rectified };
            AdjacencySource::Sparse {
                grad_mode,
                strength: g.strength,
                normalizer: g.normalizer,
                init_alpha: g.init_alpha,
                init_beta: g.init_beta.unwrap_or_else(|| half_strength_beta(data.nodes())),
            }
        }
        Method::ProxL1 | Method::ProxGroup | Method::ProxExclusive => {
            AdjacencySource::Free { normalizer: g.normalizer, init: g.prox_init }
        }
        Method::DenseBaseline => AdjacencySource::Dense { normalizer: g.normalizer },
        Method::FixedAdjacencyBaseline if g.fixed_learn_strength => {
            AdjacencySource::Masked { support: data.adjacency.clone(), normalizer: g.normalizer }
        }
        Method::FixedAdjacencyBaseline => AdjacencySource::Fixed(row_normalized(&data.adjacency)),
    })
}

/// Freshly initialized model for `config` on `data`.
pub fn build_model(config: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let mut rng = rng_for(config.seed, Stream::Init);
    Ok(match config.harness {
        Harness::Channel => {
            let d = labeled(data)?;
            Model::Channel(GatedChannelNet::new(
                d.features,
                &config.model.channel.hidden,
                d.classes,
                gate_param(config.method),
                &mut rng,
            )?)
        }
        Harness::Wiring => {
            let d = labeled(data)?;
            let w = &config.model.wiring;
            Model::Wiring(WiringNet::new(d.features, w.nodes, w.width, d.classes, gate_param(config.method), &mut rng)?)
        }
        Harness::Gcn => {
            let d = traffic(data)?;
            let g = &config.model.gcn;
            let shape = GcnShape {
                nodes: d.nodes(),
                window: g.window,
                hidden: g.hidden,
                blocks: g.blocks,
                head_layers: g.head_layers,
            };
            Model::Gcn(GcnModel::new(shape, gcn_source(config, d)?, &mut rng)?)
        }
    })
}

/// Exact zeros among gates, edges or adjacency entries, and the parameter
/// count left after deleting dead units.
pub fn sparsity_report(model: &Model) -> Result<SparsityReport> {
    match model {
        Model::Channel(net) => {
            let gates = net.gate_values()?;
            let remaining = net.freeze()?.prune().parameter_count();
            Ok(SparsityReport::from_groups(gates.iter().map(|g| g.data()), remaining))
        }
        Model::Wiring(net) => {
            let gates = net.gate_values()?;
            let width = net.width;
            let mut remaining: usize = net
                .params
                .named()
                .filter(|(name, _)| name.starts_with("stem.") || name.starts_with("head."))
                .map(|(_, t)| t.numel())
                .sum();
            for g in &gates {
                let live = g.data().iter().filter(|v| **v != 0.0).count();
                if live > 0 {
                    remaining += live + width * width;
                }
            }
            Ok(SparsityReport::from_groups(gates.iter().map(|g| g.data()), remaining))
        }
        Model::Gcn(m) => {
            let a = m.adjacency()?;
            let total = a.numel();
            let zeros = a.count_zeros();
            let weights: usize =
                m.params.named().filter(|(name, _)| !name.starts_with("adjacency.")).map(|(_, t)| t.numel()).sum();
            Ok(SparsityReport {
                sparsity_rate: zeros as f64 / total as f64,
                nonzero_count: total - zeros,
                total_count: total,
                remaining_parameters: weights + total - zeros,
                degenerate_group_count: empty_line_count(&a),
            })
        }
    }
}
