//! Graph convolutional network with one adjacency shared by every block:
//! `H^{l+1} = relu(A H^l W^l)`. The block outputs are concatenated and fed to
//! a dense output head; a dense input head lifts the raw node features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::models::init::he_uniform;
use crate::normalization::{record_normalize, record_sparse_adjacency, Normalizer, StrengthMap, TRAIN_UNROLL};
use crate::optim::{Bound, ParamId, ParamRole, ParamStore};
use crate::scalar::{canonical_zero, Scalar};
use crate::sparse_param::GradMode;
use crate::tensor::Tensor;

/// Source of the adjacency used by every block.
#[derive(Debug, Clone, PartialEq)]
pub enum AdjacencySource<T> {
    /// Constant matrix, used as given.
    Fixed(Tensor<T>),
    /// `exp(alpha)` on a fixed support, then normalized.
    Masked { support: Tensor<T>, normalizer: Normalizer },
    /// `exp(alpha)` on every pair, then normalized.
    Dense { normalizer: Normalizer },
    /// Row- and column-thresholded strengths, then normalized.
    Sparse { grad_mode: GradMode, strength: StrengthMap, normalizer: Normalizer, init_alpha: T, init_beta: T },
    /// Non-negative free entries kept sparse by a proximal step, then normalized.
    Free { normalizer: Normalizer, init: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnShape {
    pub nodes: usize,
    /// Past steps per node used as input features.
    pub window: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Dense layers in each of the input and output heads.
    pub head_layers: usize,
}

impl GcnShape {
    pub fn desk(nodes: usize) -> Self {
        GcnShape { nodes, window: 8, hidden: 16, blocks: 5, head_layers: 3 }
    }
}

#[derive(Debug, Clone, Copy)]
struct AdjacencyIds {
    alpha: Option<ParamId>,
    beta_row: Option<ParamId>,
    beta_col: Option<ParamId>,
}

/// Tape outputs of one forward pass.
pub struct GcnForward<'t, T> {
    /// `[batch * nodes, 1]` standardized outputs.
    pub output: Var<'t, T>,
    /// Adjacency after thresholding, before normalization.
    pub unnormalized: Var<'t, T>,
    /// Adjacency shared by every block.
    pub adjacency: Var<'t, T>,
    /// Outputs of every block, `[batch * nodes, hidden]`.
    pub blocks: Vec<Var<'t, T>>,
}

#[derive(Debug, Clone)]
pub struct GcnModel<T> {
    pub params: ParamStore<T>,
    pub shape: GcnShape,
    pub source: AdjacencySource<T>,
    adjacency: AdjacencyIds,
    input_head: Vec<(ParamId, ParamId)>,
    block_weights: Vec<ParamId>,
    output_head: Vec<(ParamId, ParamId)>,
}

fn dense_stack<T: Scalar>(
    params: &mut ParamStore<T>,
    prefix: &str,
    widths: &[usize],
    rng: &mut impl Rng,
) -> Vec<(ParamId, ParamId)> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            (
                params.add(format!("{prefix}{i}.weight"), ParamRole::Weight, he_uniform(rng, w[0], w[1])),
                params.add(format!("{prefix}{i}.bias"), ParamRole::Weight, Tensor::zeros(&[w[1]])),
            )
        })
        .collect()
}

impl<T: Scalar> GcnModel<T> {
    pub fn new(shape: GcnShape, source: AdjacencySource<T>, rng: &mut impl Rng) -> Result<Self> {
        let n = shape.nodes;
        if n == 0 || shape.window == 0 || shape.hidden == 0 || shape.blocks == 0 || shape.head_layers == 0 {
            return Err(Error::InvalidArgument(format!("degenerate gcn shape {shape:?}")));
        }
        let mut params = ParamStore::new();
        let mut ids = AdjacencyIds { alpha: None, beta_row: None, beta_col: None };
        match &source {
            AdjacencySource::Fixed(a) | AdjacencySource::Masked { support: a, .. } if a.shape() != [n, n] => {
                return Err(Error::Shape(format!("adjacency {:?} for {n} nodes", a.shape())));
            }
            AdjacencySource::Fixed(_) => {}
            AdjacencySource::Masked { .. } | AdjacencySource::Dense { .. } => {
                ids.alpha = Some(params.add("adjacency.alpha", ParamRole::Architecture, Tensor::zeros(&[n, n])));
            }
            AdjacencySource::Sparse { init_alpha, init_beta, .. } => {
                ids.alpha =
                    Some(params.add("adjacency.alpha", ParamRole::Architecture, Tensor::full(&[n, n], *init_alpha)));
                ids.beta_row =
                    Some(params.add("adjacency.beta_row", ParamRole::Architecture, Tensor::full(&[n], *init_beta)));
                ids.beta_col =
                    Some(params.add("adjacency.beta_col", ParamRole::Architecture, Tensor::full(&[n], *init_beta)));
            }
            AdjacencySource::Free { init, .. } => {
                ids.alpha = Some(params.add("adjacency.alpha", ParamRole::Architecture, Tensor::full(&[n, n], *init)));
            }
        }
        let h = shape.hidden;
        let mut in_widths = vec![shape.window];
        in_widths.extend(std::iter::repeat_n(h, shape.head_layers));
        let input_head = dense_stack(&mut params, "input", &in_widths, rng);
        let block_weights = (0..shape.blocks)
            .map(|l| params.add(format!("block{l}.weight"), ParamRole::Weight, he_uniform(rng, h, h)))
            .collect();
        let mut out_widths = vec![h * shape.blocks];
        out_widths.extend(std::iter::repeat_n(h, shape.head_layers - 1));
        out_widths.push(1);
        let output_head = dense_stack(&mut params, "output", &out_widths, rng);
        Ok(GcnModel { params, shape, source, adjacency: ids, input_head, block_weights, output_head })
    }

    pub fn alpha_id(&self) -> Option<ParamId> {
        self.adjacency.alpha
    }

    /// Unnormalized and normalized adjacency on the tape.
    pub fn record_adjacency<'t>(&self, bound: &Bound<'t, T>, tape: &'t Tape<T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let alpha = || bound.var(self.adjacency.alpha.expect("learned adjacency has alpha"));
        match &self.source {
            AdjacencySource::Fixed(a) => {
                let v = tape.leaf(a.clone());
                Ok((v, v))
            }
            AdjacencySource::Masked { support, normalizer } => {
                let mask = tape.leaf(support.map(|v| if v != T::zero() { T::one() } else { T::zero() }));
                let raw = alpha().exp().mul(mask)?;
                Ok((raw, record_normalize(raw, *normalizer, TRAIN_UNROLL)?))
            }
            AdjacencySource::Dense { normalizer } => {
                let raw = alpha().exp();
                Ok((raw, record_normalize(raw, *normalizer, TRAIN_UNROLL)?))
            }
            AdjacencySource::Sparse { grad_mode, strength, normalizer, .. } => {
                let raw = record_sparse_adjacency(
                    alpha(),
                    bound.var(self.adjacency.beta_row.expect("sparse adjacency has beta")),
                    bound.var(self.adjacency.beta_col.expect("sparse adjacency has beta")),
                    *grad_mode,
                    *strength,
                )?;
                Ok((raw, record_normalize(raw, *normalizer, TRAIN_UNROLL)?))
            }
            AdjacencySource::Free { normalizer, .. } => {
                let raw = alpha().relu();
                Ok((raw, record_normalize(raw, *normalizer, TRAIN_UNROLL)?))
            }
        }
    }

    /// Forward pass on `[batch * nodes, window]` standardized features.
    pub fn record<'t>(&self, bound: &Bound<'t, T>, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<GcnForward<'t, T>> {
        let (unnormalized, adjacency) = self.record_adjacency(bound, tape)?;
        let mut h = x;
        for &(w, b) in &self.input_head {
            h = h.matmul(bound.var(w))?.add_row(bound.var(b))?.relu();
        }
        let mut blocks = Vec::with_capacity(self.block_weights.len());
        for &w in &self.block_weights {
            h = adjacency.block_matmul(h)?.matmul(bound.var(w))?.relu();
            blocks.push(h);
        }
        let mut out = concat(&blocks, 1)?;
        let last = self.output_head.len() - 1;
        for (i, &(w, b)) in self.output_head.iter().enumerate() {
            out = out.matmul(bound.var(w))?.add_row(bound.var(b))?;
            if i < last {
                out = out.relu();
            }
        }
        Ok(GcnForward { output: out, unnormalized, adjacency, blocks })
    }

    /// Current normalized adjacency, with `-0` canonicalized.
    pub fn adjacency(&self) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (_, a) = self.record_adjacency(&bound, &tape)?;
        Ok(a.value().map(canonical_zero))
    }

    /// Current unnormalized adjacency.
    pub fn unnormalized_adjacency(&self) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (raw, _) = self.record_adjacency(&bound, &tape)?;
        Ok(raw.value().map(canonical_zero))
    }

    /// Standardized outputs `[batch * nodes, 1]` without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let fwd = self.record(&bound, &tape, tape.leaf(x.clone()))?;
        Ok(fwd.output.value().as_ref().clone())
    }
}
