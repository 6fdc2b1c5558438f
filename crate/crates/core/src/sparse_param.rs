//! Gate parameterizations that reach exact zero under plain gradient descent.
//!
//! A [`GateGroup`] holds free parameters `alpha` (one per component) and a
//! scalar `beta` shared by the group. `sigmoid(beta)` times the group's l1
//! mass acts as a threshold; components whose strength falls below it are
//! cut to exactly zero by a relu, so the gate value `a` is sparse while the
//! free parameters stay unconstrained reals.
//!
//! Non-negative form:
//!
//! ```text
//! gamma_i  = exp(alpha_i)
//! gamma~_i = relu(gamma_i - sigmoid(beta) * sum_j gamma_j)
//! a_i      = gamma~_i / sum_j gamma~_j        (softmax mode; raw mode keeps gamma~)
//! ```
//!
//! Signed form:
//!
//! ```text
//! a_i = sign(alpha_i) * relu(|alpha_i| - sigmoid(beta) * sum_j |alpha_j|)
//! ```
//!
//! With [`GradMode::Rectified`] the relu above is swapped for
//! [`Var::rgf_relu`], so dead components still see a gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{canonical_zero, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    NonnegSoftmax,
    NonnegRaw,
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    Exact,
    Rectified,
}

/// Per-component threshold used by the signed gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdForm {
    /// `sigmoid(beta) * ||alpha||_1`, the form used for training.
    Coupled,
    /// `sigmoid(beta)` alone; only used to analyse gradient flow.
    Simplified,
}

/// One competition group of architecture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGroup<T> {
    pub alpha: Tensor<T>,
    pub beta: T,
    pub mode: GateMode,
    pub grad_mode: GradMode,
}

/// Evaluated gates of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput<T> {
    pub a: Tensor<T>,
    /// `a_i != 0`, with no tolerance.
    pub active: Vec<bool>,
    /// Softmax group whose every member was thresholded away.
    pub degenerate: bool,
}

impl<T: Scalar> GateOutput<T> {
    fn from_values(a: &Tensor<T>, degenerate: bool) -> Self {
        let a = a.map(canonical_zero);
        let active = a.data().iter().map(|v| *v != T::zero()).collect();
        GateOutput { a, active, degenerate }
    }

    pub fn zero_count(&self) -> usize {
        self.active.iter().filter(|a| !**a).count()
    }
}

/// Gate values recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateVars<'t, T> {
    pub a: Var<'t, T>,
    pub degenerate: bool,
}

impl<T: Scalar> GateGroup<T> {
    pub fn new(alpha: Tensor<T>, beta: T, mode: GateMode, grad_mode: GradMode) -> Result<Self> {
        if alpha.numel() == 0 {
            return Err(Error::EmptyGateGroup);
        }
        if alpha.rank() != 1 {
            return Err(Error::Shape(format!("gate alpha must be rank 1, got {:?}", alpha.shape())));
        }
        if !beta.is_finite() {
            return Err(Error::NonFinite { index: 0, value: beta.to_f64_lossy() });
        }
        Ok(GateGroup { alpha, beta, mode, grad_mode })
    }

    pub fn len(&self) -> usize {
        self.alpha.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.numel() == 0
    }

    /// Evaluate the gates on a throwaway tape.
    pub fn evaluate(&self) -> Result<GateOutput<T>> {
        let tape = Tape::new();
        let alpha = tape.leaf(self.alpha.clone());
        let beta = tape.scalar(self.beta);
        let g = record_gates(alpha, beta, self.mode, self.grad_mode)?;
        Ok(GateOutput::from_values(&g.a.value(), g.degenerate))
    }
}

fn threshold_relu<'t, T: Scalar>(x: Var<'t, T>, grad_mode: GradMode) -> Var<'t, T> {
    match grad_mode {
        GradMode::Exact => x.relu(),
        GradMode::Rectified => x.rgf_relu(),
    }
}

/// Record the gate computation for free parameters already on a tape.
///
/// `alpha` is rank 1, `beta` holds one value.
pub fn record_gates<'t, T: Scalar>(
    alpha: Var<'t, T>,
    beta: Var<'t, T>,
    mode: GateMode,
    grad_mode: GradMode,
) -> Result<GateVars<'t, T>> {
    let threshold_scale = beta.sigmoid();
    match mode {
        GateMode::NonnegSoftmax | GateMode::NonnegRaw => {
            let gamma = alpha.exp();
            let threshold = threshold_scale.mul(gamma.sum())?;
            let kept = threshold_relu(gamma.sub(threshold)?, grad_mode);
            if mode == GateMode::NonnegRaw {
                return Ok(GateVars { a: kept, degenerate: false });
            }
            let total = kept.sum();
            if total.value().item()? == T::zero() {
                // all members dropped: emit zeros instead of 0/0
                return Ok(GateVars { a: kept, degenerate: true });
            }
            Ok(GateVars { a: kept.div(total)?, degenerate: false })
        }
        GateMode::Signed => {
            let threshold = threshold_scale.mul(alpha.abs().sum())?;
            let magnitude = threshold_relu(alpha.abs().sub(threshold)?, grad_mode);
            Ok(GateVars { a: alpha.sign().mul(magnitude)?, degenerate: false })
        }
    }
}

/// Signed gate with the per-component threshold `sigmoid(beta)`.
fn record_simplified<'t, T: Scalar>(alpha: Var<'t, T>, beta: Var<'t, T>, grad_mode: GradMode) -> Result<Var<'t, T>> {
    let magnitude = threshold_relu(alpha.abs().sub(beta.sigmoid())?, grad_mode);
    alpha.sign().mul(magnitude)
}

/// Non-negative gates (exp, threshold, optional renormalization).
pub fn gates_nonneg<T: Scalar>(group: &GateGroup<T>) -> Result<GateOutput<T>> {
    match group.mode {
        GateMode::NonnegSoftmax | GateMode::NonnegRaw => group.evaluate(),
        GateMode::Signed => Err(Error::WrongGateMode("signed")),
    }
}

/// Signed gates.
pub fn gates_signed<T: Scalar>(group: &GateGroup<T>) -> Result<GateOutput<T>> {
    match group.mode {
        GateMode::Signed => group.evaluate(),
        _ => Err(Error::WrongGateMode("non-negative")),
    }
}

/// Signed group of size `n` whose gates all start at exactly one half.
///
/// `alpha_i = (n + 1) / (2n)` and `beta = -ln(n^2 + n - 1)` give
/// `sigmoid(beta) = 1 / (n^2 + n)`, a threshold of `1 / (2n)`, and therefore
/// `a_i = (n + 1) / (2n) - 1 / (2n) = 1/2`.
pub fn init_half<T: Scalar>(n: usize) -> Result<GateGroup<T>> {
    init_uniform(n, T::lit(0.5), GradMode::Exact)
}

/// Signed group of size `n` whose gates all start at `value`, using the same
/// threshold as [`init_half`] and `alpha_i = value * (n + 1) / n`.
pub fn init_uniform<T: Scalar>(n: usize, value: T, grad_mode: GradMode) -> Result<GateGroup<T>> {
    if n < 1 {
        return Err(Error::EmptyGateGroup);
    }
    let nf = n as f64;
    let alpha = Tensor::full(&[n], T::lit(value.to_f64_lossy() * (nf + 1.0) / nf));
    let beta = T::lit(-(nf * nf + nf - 1.0).ln());
    GateGroup::new(alpha, beta, GateMode::Signed, grad_mode)
}

/// Gradients seen by a dead component under `L = sum_j a_j * (c_j * w_j)`,
/// where `w` are downstream weights evaluated at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult<T> {
    /// dL/d alpha_i
    pub grad_alpha: T,
    /// dL/d w_i, the signal that would pass through the dead gate
    pub grad_through: T,
}

/// Probe the learning signal of a dead signed gate.
///
/// Errors if component `index` is alive under the chosen threshold form.
pub fn dead_gate_gradient_probe<T: Scalar>(
    group: &GateGroup<T>,
    index: usize,
    form: ThresholdForm,
    weights: &[T],
) -> Result<ProbeResult<T>> {
    if group.mode != GateMode::Signed {
        return Err(Error::WrongGateMode("non-negative"));
    }
    if index >= group.len() || weights.len() != group.len() {
        return Err(Error::InvalidArgument(format!(
            "probe index {index} / {} weights for group of {}",
            weights.len(),
            group.len()
        )));
    }
    let tape = Tape::new();
    let alpha = tape.leaf(group.alpha.clone());
    let beta = tape.scalar(group.beta);
    let a = match form {
        ThresholdForm::Coupled => record_gates(alpha, beta, GateMode::Signed, group.grad_mode)?.a,
        ThresholdForm::Simplified => record_simplified(alpha, beta, group.grad_mode)?,
    };
    let ai = a.value().data()[index];
    if ai != T::zero() {
        return Err(Error::ActiveGate { index, value: ai.to_f64_lossy() });
    }
    let downstream = tape.leaf(Tensor::ones(&[group.len()]));
    let c = tape.leaf(Tensor::new(vec![group.len()], weights.to_vec())?);
    let loss = a.mul(c)?.mul(downstream)?.sum();
    let grads = tape.backward(loss)?;
    Ok(ProbeResult { grad_alpha: grads.wrt(alpha).data()[index], grad_through: grads.wrt(downstream).data()[index] })
}
