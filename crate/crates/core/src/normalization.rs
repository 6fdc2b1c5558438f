//! Learnable sparse adjacency and doubly-stochastic normalization.
//!
//! Each entry of the unnormalized adjacency competes in two groups at once,
//! its row and its column:
//!
//! ```text
//! gamma_ij = exp(alpha_ij)
//! A~_ij    = relu(gamma_ij - sigmoid(br_i) * sum_k gamma_ik - sigmoid(bc_j) * sum_k gamma_kj)
//! ```
//!
//! The thresholded matrix is then pushed towards double stochasticity by
//! alternating row/column scaling (Sinkhorn) or by symmetric inverse square
//! root scaling (balanced). Lines that are entirely zero are left at zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{canonical_zero, Scalar};
use crate::sparse_param::GradMode;
use crate::tensor::Tensor;

pub const EVAL_TOL: f64 = 1e-8;
pub const EVAL_MAX_ITERS: usize = 1000;
/// Unrolled iterations recorded on the tape during training.
pub const TRAIN_UNROLL: usize = 15;

/// How the free parameters map to non-negative strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrengthMap {
    /// `gamma = exp(alpha)`.
    #[default]
    Exp,
    /// `gamma = alpha` with group masses taken as `sum |alpha|`; alpha is kept
    /// non-negative by the optimizer.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    Sinkhorn,
    #[default]
    Balanced,
}

/// `N x N` free parameters with one threshold per row and per column.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyParam<T> {
    pub alpha: Tensor<T>,
    pub beta_row: Tensor<T>,
    pub beta_col: Tensor<T>,
    pub grad_mode: GradMode,
    pub strength: StrengthMap,
}

impl<T: Scalar> AdjacencyParam<T> {
    pub fn new(
        alpha: Tensor<T>,
        beta_row: Tensor<T>,
        beta_col: Tensor<T>,
        grad_mode: GradMode,
        strength: StrengthMap,
    ) -> Result<Self> {
        let n = alpha.rows();
        if alpha.rank() != 2 || alpha.cols() != n || n == 0 {
            return Err(Error::Shape(format!("adjacency alpha must be square, got {:?}", alpha.shape())));
        }
        if beta_row.shape() != [n] || beta_col.shape() != [n] {
            return Err(Error::Shape(format!(
                "beta shapes {:?} / {:?} for {n} nodes",
                beta_row.shape(),
                beta_col.shape()
            )));
        }
        Ok(AdjacencyParam { alpha, beta_row, beta_col, grad_mode, strength })
    }

    /// Uniform initial values for every entry and every threshold.
    pub fn uniform(n: usize, alpha: T, beta: T, grad_mode: GradMode, strength: StrengthMap) -> Result<Self> {
        Self::new(Tensor::full(&[n, n], alpha), Tensor::full(&[n], beta), Tensor::full(&[n], beta), grad_mode, strength)
    }

    pub fn n(&self) -> usize {
        self.alpha.rows()
    }
}

/// Non-negative square matrix with flags for the normalized directions.
#[derive(Debug, Clone, PartialEq)]
pub struct StochMatrix<T> {
    pub values: Tensor<T>,
    pub row_normalized: bool,
    pub col_normalized: bool,
    /// Iterations used by an iterative normalizer, 0 otherwise.
    pub iterations: usize,
}

impl<T: Scalar> StochMatrix<T> {
    fn unnormalized(values: Tensor<T>) -> Self {
        StochMatrix { values, row_normalized: false, col_normalized: false, iterations: 0 }
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.numel() - self.values.count_zeros()
    }
}

/// Thresholded adjacency recorded on a tape. `alpha` is `[n, n]`, the betas `[n]`.
pub fn record_sparse_adjacency<'t, T: Scalar>(
    alpha: Var<'t, T>,
    beta_row: Var<'t, T>,
    beta_col: Var<'t, T>,
    grad_mode: GradMode,
    strength: StrengthMap,
) -> Result<Var<'t, T>> {
    let (gamma, mass) = match strength {
        StrengthMap::Exp => {
            let g = alpha.exp();
            (g, g)
        }
        StrengthMap::Linear => (alpha, alpha.abs()),
    };
    let row_threshold = beta_row.sigmoid().mul(mass.sum_axis(1)?)?;
    let col_threshold = beta_col.sigmoid().mul(mass.sum_axis(0)?)?;
    let shifted = gamma.add_col(row_threshold.neg())?.add_row(col_threshold.neg())?;
    Ok(match grad_mode {
        GradMode::Exact => shifted.relu(),
        GradMode::Rectified => shifted.rgf_relu(),
    })
}

/// Thresholded, unnormalized adjacency.
pub fn sparse_adjacency<T: Scalar>(param: &AdjacencyParam<T>) -> Result<StochMatrix<T>> {
    let tape = Tape::new();
    let a = record_sparse_adjacency(
        tape.leaf(param.alpha.clone()),
        tape.leaf(param.beta_row.clone()),
        tape.leaf(param.beta_col.clone()),
        param.grad_mode,
        param.strength,
    )?;
    let values = a.value().map(canonical_zero);
    Ok(StochMatrix::unnormalized(values))
}

fn check_square_nonneg<T: Scalar>(m: &Tensor<T>) -> Result<usize> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::Shape(format!("expected square matrix, got {:?}", m.shape())));
    }
    if let Some((index, v)) = m.data().iter().enumerate().find(|(_, v)| !(**v >= T::zero())) {
        return Err(Error::NegativeInput { index, value: v.to_f64_lossy() });
    }
    Ok(m.rows())
}

fn check_support<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    let empty_line = |sums: Vec<T>| sums.iter().any(|s| *s <= T::zero());
    if empty_line(m.row_sums()) || empty_line(m.col_sums()) {
        return Err(Error::NoTotalSupport);
    }
    Ok(())
}

/// Largest `|line sum - 1|` over all rows and columns.
pub fn stochastic_deviation<T: Scalar>(m: &Tensor<T>) -> T {
    m.row_sums().into_iter().chain(m.col_sums()).map(|s| (s - T::one()).abs()).fold(T::zero(), T::max)
}

fn scale_rows<T: Scalar>(m: &mut Tensor<T>, factors: &[T]) {
    let c = m.cols();
    for (row, &f) in m.data_mut().chunks_mut(c).zip(factors) {
        row.iter_mut().for_each(|v| *v *= f);
    }
}

fn scale_cols<T: Scalar>(m: &mut Tensor<T>, factors: &[T]) {
    let c = m.cols();
    for row in m.data_mut().chunks_mut(c) {
        row.iter_mut().zip(factors).for_each(|(v, &f)| *v *= f);
    }
}

fn guarded_pow<T: Scalar>(sums: Vec<T>, p: T) -> Vec<T> {
    sums.into_iter().map(|s| if s > T::zero() { s.powf(p) } else { T::zero() }).collect()
}

fn iterate_to_tolerance<T: Scalar>(
    m: &Tensor<T>,
    tol: T,
    max_iters: usize,
    step: impl Fn(&mut Tensor<T>),
) -> Result<StochMatrix<T>> {
    check_square_nonneg(m)?;
    check_support(m)?;
    let mut a = m.clone();
    let mut deviation = stochastic_deviation(&a);
    for it in 0..max_iters {
        if deviation < tol {
            return Ok(StochMatrix { values: a, row_normalized: true, col_normalized: true, iterations: it });
        }
        step(&mut a);
        deviation = stochastic_deviation(&a);
    }
    if deviation < tol {
        return Ok(StochMatrix { values: a, row_normalized: true, col_normalized: true, iterations: max_iters });
    }
    Err(Error::NotConverged { iters: max_iters, deviation: deviation.to_f64_lossy() })
}

/// Alternate `A <- D_r^{-1} A` and `A <- A D_c^{-1}` until every line sum is
/// within `tol` of one.
pub fn sinkhorn<T: Scalar>(m: &Tensor<T>, tol: T, max_iters: usize) -> Result<StochMatrix<T>> {
    iterate_to_tolerance(m, tol, max_iters, |a| {
        let r = guarded_pow(a.row_sums(), -T::one());
        scale_rows(a, &r);
        let c = guarded_pow(a.col_sums(), -T::one());
        scale_cols(a, &c);
    })
}

/// Repeat `A <- D_r^{-1/2} A D_c^{-1/2}` until every line sum is within `tol` of one.
pub fn balanced_normalize<T: Scalar>(m: &Tensor<T>, tol: T, max_iters: usize) -> Result<StochMatrix<T>> {
    let half = T::lit(-0.5);
    iterate_to_tolerance(m, tol, max_iters, |a| {
        let r = guarded_pow(a.row_sums(), half);
        let c = guarded_pow(a.col_sums(), half);
        scale_rows(a, &r);
        scale_cols(a, &c);
    })
}

/// Row-normalized and column-normalized copies. All-zero lines stay zero.
pub fn partial_normalize<T: Scalar>(m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check_square_nonneg(m)?;
    let mut rows = m.clone();
    scale_rows(&mut rows, &guarded_pow(m.row_sums(), -T::one()));
    let mut cols = m.clone();
    scale_cols(&mut cols, &guarded_pow(m.col_sums(), -T::one()));
    Ok((rows, cols))
}

/// Number of all-zero rows plus all-zero columns.
pub fn empty_line_count<T: Scalar>(m: &Tensor<T>) -> usize {
    m.row_sums().into_iter().chain(m.col_sums()).filter(|s| *s == T::zero()).count()
}

/// `iters` normalization steps recorded on the tape. Empty lines are
/// excluded through the guarded reciprocal of [`Var::pow_nonneg`].
pub fn record_normalize<'t, T: Scalar>(m: Var<'t, T>, normalizer: Normalizer, iters: usize) -> Result<Var<'t, T>> {
    let mut a = m;
    for _ in 0..iters {
        a = match normalizer {
            Normalizer::Sinkhorn => {
                let a = a.mul_col(a.sum_axis(1)?.pow_nonneg(-T::one())?)?;
                a.mul_row(a.sum_axis(0)?.pow_nonneg(-T::one())?)?
            }
            Normalizer::Balanced => {
                let half = T::lit(-0.5);
                let r = a.sum_axis(1)?.pow_nonneg(half)?;
                let c = a.sum_axis(0)?.pow_nonneg(half)?;
                a.mul_col(r)?.mul_row(c)?
            }
        };
    }
    Ok(a)
}

/// Evaluation-time normalization to tolerance with the chosen rule.
pub fn normalize<T: Scalar>(m: &Tensor<T>, normalizer: Normalizer, tol: T, max_iters: usize) -> Result<StochMatrix<T>> {
    match normalizer {
        Normalizer::Sinkhorn => sinkhorn(m, tol, max_iters),
        Normalizer::Balanced => balanced_normalize(m, tol, max_iters),
    }
}
