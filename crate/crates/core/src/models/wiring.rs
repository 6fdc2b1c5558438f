//! Neural wiring: a DAG of nodes where `y_v = sum_(u,v) w_uv x_u`, and every
//! edge weight is a gate that training may cut to exactly zero.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::init::he_uniform;
use crate::models::GateParam;
use crate::optim::{Bound, ParamId, ParamRole, ParamStore};
use crate::scalar::{canonical_zero, Scalar};
use crate::sparse_param::{init_uniform, record_gates, GateGroup, GateMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, t: Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => t.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Identity => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub from: usize,
    pub to: usize,
    pub weight: T,
}

/// Evaluation form of a wiring graph.
///
/// Nodes `0..inputs` take the external inputs. Every other node computes
/// `x_v = act(y_v W_v)` (or `act(y_v)` without a transform) with
/// `y_v = sum_(u,v) w_uv x_u` over its nonzero in-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct WiringGraph<T> {
    pub nodes: usize,
    pub inputs: usize,
    pub edges: Vec<Edge<T>>,
    pub activation: Activation,
    pub transforms: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> WiringGraph<T> {
    pub fn new(nodes: usize, inputs: usize, edges: Vec<Edge<T>>, activation: Activation) -> Result<Self> {
        if inputs == 0 || inputs > nodes {
            return Err(Error::InvalidArgument(format!("{inputs} inputs for {nodes} nodes")));
        }
        if let Some(e) = edges.iter().find(|e| e.from >= nodes || e.to >= nodes) {
            return Err(Error::InvalidArgument(format!("edge {}->{} outside {nodes} nodes", e.from, e.to)));
        }
        if let Some(e) = edges.iter().find(|e| e.to < inputs) {
            return Err(Error::InvalidArgument(format!("edge into input node {}", e.to)));
        }
        Ok(WiringGraph { nodes, inputs, edges, activation, transforms: vec![None; nodes] })
    }

    /// Node order in which every edge points forward.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut indegree = vec![0usize; self.nodes];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.nodes];
        for e in &self.edges {
            indegree[e.to] += 1;
            out[e.from].push(e.to);
        }
        let mut queue: VecDeque<usize> = (0..self.nodes).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &out[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if order.len() != self.nodes {
            return Err(Error::CycleDetected);
        }
        Ok(order)
    }

    /// Fraction of edges whose weight is exactly zero.
    pub fn edge_sparsity(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().filter(|e| e.weight == T::zero()).count() as f64 / self.edges.len() as f64
    }
}

/// Outputs of every node. `inputs` holds one `[batch, width]` tensor per input node.
pub fn wiring_forward<T: Scalar>(g: &WiringGraph<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if inputs.len() != g.inputs {
        return Err(Error::InvalidArgument(format!("{} inputs for {} input nodes", inputs.len(), g.inputs)));
    }
    let shape = inputs[0].shape().to_vec();
    if inputs.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::Shape("input nodes disagree on shape".into()));
    }
    let order = g.topological_order()?;
    let mut incoming: Vec<Vec<(usize, T)>> = vec![Vec::new(); g.nodes];
    for e in g.edges.iter().filter(|e| e.weight != T::zero()) {
        incoming[e.to].push((e.from, e.weight));
    }
    let mut values: Vec<Option<Tensor<T>>> = vec![None; g.nodes];
    for (v, x) in inputs.iter().enumerate() {
        values[v] = Some(x.clone());
    }
    for v in order.into_iter().filter(|&v| v >= g.inputs) {
        let mut y = Tensor::zeros(&shape);
        for &(u, w) in &incoming[v] {
            let xu = values[u].as_ref().expect("topological order");
            y.data_mut().iter_mut().zip(xu.data()).for_each(|(acc, &x)| *acc += w * x);
        }
        if let Some(t) = &g.transforms[v] {
            y = y.matmul(t)?;
        }
        values[v] = Some(g.activation.apply(y));
    }
    Ok(values.into_iter().map(|v| v.expect("every node evaluated")).collect())
}

/// Trainable wiring classifier.
///
/// A dense stem feeds node 0; nodes `1..n` aggregate from every earlier node
/// through gated edges and apply their own `width x width` transform and
/// relu; a linear head reads the last node. The in-edges of each node form
/// one competition group.
#[derive(Debug, Clone)]
pub struct WiringNet<T> {
    pub params: ParamStore<T>,
    pub gate_param: GateParam,
    pub nodes: usize,
    pub width: usize,
    stem: (ParamId, ParamId),
    transforms: Vec<ParamId>,
    /// Per destination node `v >= 1`: alpha (or free gates) and beta.
    groups: Vec<(ParamId, Option<ParamId>)>,
    head: (ParamId, ParamId),
}

impl<T: Scalar> WiringNet<T> {
    pub fn new(
        input_dim: usize,
        nodes: usize,
        width: usize,
        classes: usize,
        gate_param: GateParam,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if nodes < 2 || width == 0 || input_dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "wiring net needs >= 2 nodes, got {nodes} nodes / width {width} / {classes} classes"
            )));
        }
        let mut params = ParamStore::new();
        let stem = (
            params.add("stem.weight", ParamRole::Weight, he_uniform(rng, input_dim, width)),
            params.add("stem.bias", ParamRole::Weight, Tensor::zeros(&[width])),
        );
        let mut transforms = Vec::new();
        let mut groups = Vec::new();
        for v in 1..nodes {
            transforms.push(params.add(format!("node{v}.weight"), ParamRole::Weight, he_uniform(rng, width, width)));
            // keep the aggregate's scale independent of the fan-in
            let start = T::lit(1.0 / (v as f64).sqrt());
            groups.push(match gate_param {
                GateParam::Sparse(grad_mode) => {
                    let g = init_uniform(v, start, grad_mode)?;
                    (
                        params.add(format!("node{v}.alpha"), ParamRole::Architecture, g.alpha),
                        Some(params.add(format!("node{v}.beta"), ParamRole::Architecture, Tensor::scalar(g.beta))),
                    )
                }
                GateParam::Free => {
                    (params.add(format!("node{v}.gate"), ParamRole::Architecture, Tensor::full(&[v], start)), None)
                }
            });
        }
        let head = (
            params.add("head.weight", ParamRole::Weight, he_uniform(rng, width, classes)),
            params.add("head.bias", ParamRole::Weight, Tensor::zeros(&[classes])),
        );
        Ok(WiringNet { params, gate_param, nodes, width, stem, transforms, groups, head })
    }

    pub fn edge_count(&self) -> usize {
        self.nodes * (self.nodes - 1) / 2
    }

    fn record_group<'t>(&self, bound: &Bound<'t, T>, group: &(ParamId, Option<ParamId>)) -> Result<Var<'t, T>> {
        match (self.gate_param, group.1) {
            (GateParam::Sparse(grad_mode), Some(beta)) => {
                Ok(record_gates(bound.var(group.0), bound.var(beta), GateMode::Signed, grad_mode)?.a)
            }
            _ => Ok(bound.var(group.0)),
        }
    }

    /// Logits and the gate vector of every in-edge group.
    pub fn record<'t>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let stem = x.matmul(bound.var(self.stem.0))?.add_row(bound.var(self.stem.1))?.relu();
        let mut values = vec![stem];
        let mut gates = Vec::new();
        for (k, group) in self.groups.iter().enumerate() {
            let a = self.record_group(bound, group)?;
            let mut y: Option<Var<'t, T>> = None;
            for (u, xu) in values.iter().enumerate() {
                let term = xu.mul(a.gather(&[u])?.reshape(&[])?)?;
                y = Some(match y {
                    Some(acc) => acc.add(term)?,
                    None => term,
                });
            }
            let y = y.expect("node has at least one in-edge");
            values.push(y.matmul(bound.var(self.transforms[k]))?.relu());
            gates.push(a);
        }
        let last = values.last().expect("nodes >= 2");
        let logits = last.matmul(bound.var(self.head.0))?.add_row(bound.var(self.head.1))?;
        Ok((logits, gates))
    }

    /// Gate values per destination node `1..n`, with `-0` canonicalized.
    pub fn gate_values(&self) -> Result<Vec<Tensor<T>>> {
        self.groups
            .iter()
            .map(|(alpha, beta)| match (self.gate_param, beta) {
                (GateParam::Sparse(grad_mode), Some(beta)) => Ok(GateGroup::new(
                    self.params.get(*alpha).clone(),
                    self.params.get(*beta).item()?,
                    GateMode::Signed,
                    grad_mode,
                )?
                .evaluate()?
                .a),
                _ => Ok(self.params.get(*alpha).map(canonical_zero)),
            })
            .collect()
    }

    pub fn free_gate_ids(&self) -> Vec<ParamId> {
        match self.gate_param {
            GateParam::Free => self.groups.iter().map(|g| g.0).collect(),
            GateParam::Sparse(_) => Vec::new(),
        }
    }

    /// Evaluation graph over nodes `0..n` with node 0 as the single input.
    pub fn graph(&self) -> Result<WiringGraph<T>> {
        let mut edges = Vec::with_capacity(self.edge_count());
        for (k, gates) in self.gate_values()?.into_iter().enumerate() {
            let to = k + 1;
            for (from, &w) in gates.data().iter().enumerate() {
                edges.push(Edge { from, to, weight: w });
            }
        }
        let mut g = WiringGraph::new(self.nodes, 1, edges, Activation::Relu)?;
        for (k, id) in self.transforms.iter().enumerate() {
            g.transforms[k + 1] = Some(self.params.get(*id).clone());
        }
        Ok(g)
    }

    /// Logits through the evaluation graph, skipping zero edges.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let stem = tape
            .leaf(x.clone())
            .matmul(tape.leaf(self.params.get(self.stem.0).clone()))?
            .add_row(tape.leaf(self.params.get(self.stem.1).clone()))?
            .relu();
        let outputs = wiring_forward(&self.graph()?, &[stem.value().as_ref().clone()])?;
        let last = outputs.last().expect("nodes >= 2");
        let mut logits = last.matmul(self.params.get(self.head.0))?;
        let c = logits.cols();
        let bias = self.params.get(self.head.1);
        for row in logits.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v += b);
        }
        Ok(logits)
    }
}
