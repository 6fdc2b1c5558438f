//! Sparsity penalties on gate values, differentiable through the tape.
//!
//! Swapping the penalty kind changes which sparsity pattern training finds
//! (single components under l1, whole groups under l2,1, competition inside
//! groups under the exclusive l1,2 norm or lp with p < 1) without touching
//! the prediction path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Serialized as `"l1"`, `"group-l21"`, `"exclusive-l12"` or `{"lp": {"p": 0.5}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    L1,
    GroupL21,
    ExclusiveL12,
    Lp { p: f64 },
}

/// Partition of gate indices into disjoint groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grouping(pub Vec<Vec<usize>>);

impl Grouping {
    /// A single group holding every index.
    pub fn single(n: usize) -> Self {
        Grouping(vec![(0..n).collect()])
    }

    /// Consecutive groups of `size` members (the last one may be shorter).
    pub fn chunks(n: usize, size: usize) -> Self {
        let size = size.max(1);
        Grouping((0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect())
    }

    pub fn singletons(n: usize) -> Self {
        Grouping((0..n).map(|i| vec![i]).collect())
    }

    /// Rows then columns of an `n x n` matrix stored row-major.
    pub fn rows_and_cols(n: usize) -> (Self, Self) {
        let rows = (0..n).map(|i| (0..n).map(|j| i * n + j).collect()).collect();
        let cols = (0..n).map(|j| (0..n).map(|i| i * n + j).collect()).collect();
        (Grouping(rows), Grouping(cols))
    }

    /// Check that the groups are non-empty, disjoint and cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for g in &self.0 {
            if g.is_empty() {
                return Err(Error::EmptyGroup);
            }
            for &i in g {
                if i >= n {
                    return Err(Error::InvalidGrouping(format!("index {i} out of range {n}")));
                }
                if seen[i] {
                    return Err(Error::InvalidGrouping(format!("index {i} in two groups")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGrouping(format!("index {i} not covered")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// `None` means one group with every gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        RegularizerSpec { kind, lambda, grouping: None }
    }

    pub fn with_grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = Some(grouping);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let RegularizerKind::Lp { p } = self.kind {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!("lp needs p in (0, 1], got {p}")));
            }
        }
        Ok(())
    }

    fn groups(&self, n: usize) -> Result<Grouping> {
        let g = self.grouping.clone().unwrap_or_else(|| Grouping::single(n));
        g.validate(n)?;
        Ok(g)
    }
}

/// `R(a)` recorded on the tape. The caller scales by lambda.
pub fn penalty<'t, T: Scalar>(spec: &RegularizerSpec, a: Var<'t, T>) -> Result<Var<'t, T>> {
    spec.validate()?;
    let flat = a.reshape(&[a.value().numel()])?;
    let n = flat.value().numel();
    match spec.kind {
        RegularizerKind::L1 => Ok(flat.abs().sum()),
        RegularizerKind::GroupL21 => {
            let groups = spec.groups(n)?;
            sum_over_groups(flat, &groups, |g| g.safe_l2_norm(None))
        }
        RegularizerKind::ExclusiveL12 => {
            let groups = spec.groups(n)?;
            let total = sum_over_groups(flat, &groups, |g| {
                let l1 = g.abs().sum();
                l1.mul(l1)
            })?;
            Ok(total.mul_scalar(T::lit(0.5)))
        }
        RegularizerKind::Lp { p } => {
            let values = flat.value();
            if let Some((index, v)) = values.data().iter().enumerate().find(|(_, v)| **v < T::zero()) {
                return Err(Error::NegativeInput { index, value: v.to_f64_lossy() });
            }
            // zero gates contribute 0 with zero gradient
            let powered = flat.pow_nonneg(T::lit(p))?.sum();
            powered.pow_nonneg(T::lit(1.0 / p))
        }
    }
}

fn sum_over_groups<'t, T: Scalar>(
    flat: Var<'t, T>,
    groups: &Grouping,
    per_group: impl Fn(Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for g in &groups.0 {
        let term = per_group(flat.gather(g)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyGroup)
}

/// `sum_g R(a_g)` with `R` applied to each group on its own, so an lp
/// penalty becomes a sum of per-group lp norms. The grouping stored in `spec` is
/// ignored.
pub fn penalty_per_group<'t, T: Scalar>(
    spec: &RegularizerSpec,
    a: Var<'t, T>,
    groups: &Grouping,
) -> Result<Var<'t, T>> {
    let n = a.value().numel();
    groups.validate(n)?;
    let flat = a.reshape(&[n])?;
    let single = RegularizerSpec { grouping: None, ..spec.clone() };
    sum_over_groups(flat, groups, |g| penalty(&single, g))
}

/// `lambda * R(a)`, the term added to the prediction loss.
pub fn weighted_penalty<'t, T: Scalar>(spec: &RegularizerSpec, a: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(penalty(spec, a)?.mul_scalar(T::lit(spec.lambda)))
}

/// Value of `R(a)` for plain tensors.
pub fn penalty_value<T: Scalar>(spec: &RegularizerSpec, a: &Tensor<T>) -> Result<T> {
    let tape = Tape::new();
    let v = penalty(spec, tape.leaf(a.clone()))?;
    v.value().item()
}

/// Gradient of `R(a)` for plain tensors.
pub fn penalty_gradient<T: Scalar>(spec: &RegularizerSpec, a: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let leaf = tape.leaf(a.clone());
    let v = penalty(spec, leaf)?;
    Ok(tape.backward(v)?.wrt(leaf))
}

/// Largest distance from a kink required before comparing with finite differences.
pub const KINK_MARGIN: f64 = 1e-3;

/// Max relative error between the tape gradient of `R` and central finite
/// differences. Inputs within [`KINK_MARGIN`] of zero are rejected.
pub fn penalty_gradient_check(spec: &RegularizerSpec, a: &Tensor<f64>) -> Result<f64> {
    for (index, v) in a.data().iter().enumerate() {
        if v.abs() <= KINK_MARGIN {
            return Err(Error::AtKink { index, distance: v.abs() });
        }
    }
    let analytic = penalty_gradient(spec, a)?;
    let numeric = gradcheck::central_difference(|x| penalty_value(spec, x), a, gradcheck::FD_STEP)?;
    Ok(gradcheck::relative_error(&analytic, &numeric))
}
