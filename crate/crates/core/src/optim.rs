//! Named parameter storage, optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Weights fit the prediction; architecture parameters produce gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Architecture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), roles: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.roles.push(role);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// `(name, tensor)` pairs in insertion order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients in store order.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| g.wrt(*v)).collect()
    }
}

/// Piecewise-constant schedule: the base rate times every factor whose
/// milestone fraction of training has been reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub base: f64,
    /// `(fraction of total epochs, multiplicative factor)`.
    pub milestones: Vec<(f64, f64)>,
}

impl StepSchedule {
    pub fn constant(base: f64) -> Self {
        StepSchedule { base, milestones: Vec::new() }
    }

    /// Divide by 10 at 50% and 75% of training.
    pub fn tenfold_decay(base: f64) -> Self {
        StepSchedule { base, milestones: vec![(0.5, 0.1), (0.75, 0.1)] }
    }

    /// Halve at 80% and 90% of training.
    pub fn late_halving(base: f64) -> Self {
        StepSchedule { base, milestones: vec![(0.8, 0.5), (0.9, 0.5)] }
    }

    pub fn rate(&self, epoch: usize, total: usize) -> f64 {
        let progress = epoch as f64 / total.max(1) as f64;
        self.milestones.iter().filter(|(at, _)| progress >= *at).fold(self.base, |lr, (_, f)| lr * f)
    }
}

/// First-order update rule over a [`ParamStore`].
pub trait Optimizer<T: Scalar> {
    /// Apply one update. `only` restricts the update to parameters of one role.
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T, only: Option<ParamRole>) -> Result<()>;
}

fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape(format!("gradient for {} has shape {:?}", store.name(id), g.shape())));
        }
    }
    Ok(())
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T, only: Option<ParamRole>) -> Result<()> {
        check_grads(store, grads)?;
        if self.velocity.is_empty() {
            self.velocity = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            if only.is_some_and(|r| r != store.roles[i]) {
                continue;
            }
            let vel = self.velocity[i].data_mut();
            let w = store.values[i].data_mut();
            for ((v, w), &g) in vel.iter_mut().zip(w.iter_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T, only: Option<ParamRole>) -> Result<()> {
        check_grads(store, grads)?;
        if self.m.is_empty() {
            self.m = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            if only.is_some_and(|r| r != store.roles[i]) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.values[i].data_mut();
            for (((m, v), w), &g) in m.iter_mut().zip(v.iter_mut()).zip(w.iter_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
