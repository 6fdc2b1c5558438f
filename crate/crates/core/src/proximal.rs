//! Closed-form proximal steps for the baseline optimizers.
//!
//! Each step maps `w` to `argmin_v 1/2 ||v - w||^2 + t R(v)` with
//! `t = eta * lambda`, applied after the gradient step of the prediction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::Grouping;
use crate::scalar::{sign, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxKind {
    /// Soft threshold by `t`.
    L1,
    /// Shrink each group's l2 norm by `t`.
    GroupL21,
    /// Exact prox of `t/2 * sum_g ||v_g||_1^2`.
    ExclusiveL12,
    /// Shrink every member by `t * ||w_g||_1` evaluated at the incoming point.
    /// Cheaper than the exact prox and over-shrinks by a factor up to `1 + t * |g|`.
    ExclusiveL12Linearized,
    /// `(w - t * ||w_g||_1)_+` for non-negative parameters.
    ExclusiveNonneg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxSpec {
    pub kind: ProxKind,
    pub lambda: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping: Option<Grouping>,
}

impl ProxSpec {
    pub fn new(kind: ProxKind, lambda: f64, eta: f64) -> Self {
        ProxSpec { kind, lambda, eta, grouping: None }
    }

    pub fn with_grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = Some(grouping);
        self
    }

    /// `eta * lambda`.
    pub fn strength(&self) -> f64 {
        self.eta * self.lambda
    }

    fn validate(&self, n: usize) -> Result<Grouping> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        let g = self.grouping.clone().unwrap_or_else(|| Grouping::single(n));
        g.validate(n)?;
        Ok(g)
    }
}

/// Apply one proximal step to `w` (any shape; groups index the flat data).
pub fn prox_step<T: Scalar>(spec: &ProxSpec, w: &Tensor<T>) -> Result<Tensor<T>> {
    let groups = spec.validate(w.numel())?;
    let t = T::lit(spec.strength());
    let mut out = w.clone();
    if spec.kind == ProxKind::ExclusiveNonneg {
        if let Some((index, v)) = w.data().iter().enumerate().find(|(_, v)| **v < T::zero()) {
            return Err(Error::NegativeInput { index, value: v.to_f64_lossy() });
        }
    }
    let data = out.data_mut();
    match spec.kind {
        ProxKind::L1 => data.iter_mut().for_each(|v| *v = soft_threshold(*v, t)),
        ProxKind::GroupL21 => {
            for g in &groups.0 {
                let norm = g.iter().map(|&i| data[i] * data[i]).sum::<T>().sqrt();
                for &i in g {
                    data[i] = if norm > t { data[i] / norm * (norm - t) } else { T::zero() };
                }
            }
        }
        ProxKind::ExclusiveL12 => {
            for g in &groups.0 {
                let shift = exclusive_shift(g.iter().map(|&i| data[i].abs()).collect(), t);
                for &i in g {
                    data[i] = soft_threshold(data[i], shift);
                }
            }
        }
        ProxKind::ExclusiveL12Linearized | ProxKind::ExclusiveNonneg => {
            for g in &groups.0 {
                let shift = t * g.iter().map(|&i| data[i].abs()).sum::<T>();
                for &i in g {
                    data[i] = soft_threshold(data[i], shift);
                }
            }
        }
    }
    Ok(out)
}

fn soft_threshold<T: Scalar>(v: T, t: T) -> T {
    let m = v.abs() - t;
    if m > T::zero() {
        sign(v) * m
    } else {
        T::zero()
    }
}

/// Shift `t * S` of the exact exclusive prox, where `S` is the l1 mass of the
/// result: with magnitudes `u` sorted descending and `k` the size of the
/// active set, `S = sum_{j<=k} u_j / (1 + t k)` and `u_k > t S`.
fn exclusive_shift<T: Scalar>(mut u: Vec<T>, t: T) -> T {
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    let mut prefix = T::zero();
    let mut mass = T::zero();
    for (k, &uk) in u.iter().enumerate() {
        let candidate = (prefix + uk) / (T::one() + t * T::from_usize(k + 1).unwrap());
        if uk > t * candidate {
            prefix += uk;
            mass = candidate;
        } else {
            break;
        }
    }
    t * mass
}

/// Brute-force minimizer of `1/2 ||v - w||^2 + t R(v)` for groups of one or
/// two members, by grid search then pattern-search refinement.
///
/// Returns the largest absolute deviation between [`prox_step`] and the
/// minimizer. The shrink-rule kinds are compared against the objective of the
/// exclusive norm.
pub fn prox_oracle_check(spec: &ProxSpec, w: &Tensor<f64>) -> Result<f64> {
    let groups = spec.validate(w.numel())?;
    let closed = prox_step(spec, w)?;
    let t = spec.strength();
    let mut worst: f64 = 0.0;
    for g in &groups.0 {
        if g.len() > 2 {
            return Err(Error::InvalidArgument("oracle supports groups of at most two".into()));
        }
        let wg: Vec<f64> = g.iter().map(|&i| w.data()[i]).collect();
        let objective = |v: &[f64]| {
            let dist: f64 = v.iter().zip(&wg).map(|(a, b)| (a - b) * (a - b)).sum();
            0.5 * dist + t * group_penalty(spec.kind, v)
        };
        let best = minimize_box(&objective, &wg);
        for (&i, b) in g.iter().zip(&best) {
            worst = worst.max((closed.data()[i] - b).abs());
        }
    }
    Ok(worst)
}

fn group_penalty(kind: ProxKind, v: &[f64]) -> f64 {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    match kind {
        ProxKind::L1 => l1,
        ProxKind::GroupL21 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        ProxKind::ExclusiveL12 | ProxKind::ExclusiveL12Linearized | ProxKind::ExclusiveNonneg => 0.5 * l1 * l1,
    }
}

const GRID: usize = 400;

fn minimize_box(f: &dyn Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
    // every minimizer lies in the box spanned by 0 and w
    let lo: Vec<f64> = w.iter().map(|x| x.min(0.0)).collect();
    let hi: Vec<f64> = w.iter().map(|x| x.max(0.0)).collect();
    let point = |idx: &[usize]| -> Vec<f64> {
        idx.iter().enumerate().map(|(d, &k)| lo[d] + (hi[d] - lo[d]) * k as f64 / GRID as f64).collect()
    };
    let mut best = point(&vec![0; w.len()]);
    let mut best_val = f(&best);
    let mut idx = vec![0usize; w.len()];
    loop {
        let p = point(&idx);
        let val = f(&p);
        if val < best_val {
            best_val = val;
            best = p;
        }
        let mut d = 0;
        loop {
            if d == idx.len() {
                return refine(f, best, best_val, &lo, &hi);
            }
            idx[d] += 1;
            if idx[d] <= GRID {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

fn refine(f: &dyn Fn(&[f64]) -> f64, mut x: Vec<f64>, mut fx: f64, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let span = lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max);
    let mut step = span / GRID as f64;
    let dim = x.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for d in 0..dim {
        for s in [-1.0, 1.0] {
            let mut e = vec![0.0; dim];
            e[d] = s;
            dirs.push(e);
        }
    }
    if dim == 2 {
        for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            dirs.push(vec![a, b]);
        }
    }
    while step > 1e-12 {
        let mut improved = false;
        for e in &dirs {
            let cand: Vec<f64> = x.iter().zip(e).map(|(v, d)| v + step * d).collect();
            let fc = f(&cand);
            if fc < fx {
                x = cand;
                fx = fc;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn l1_hand_values() {
        let spec = ProxSpec::new(ProxKind::L1, 0.2, 1.0);
        let out = prox_step(&spec, &v(&[0.7, 0.1, -0.7])).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn group_hand_values() {
        let spec = ProxSpec::new(ProxKind::GroupL21, 1.0, 1.0);
        let out = prox_step(&spec, &v(&[3.0, 4.0])).unwrap();
        assert!((out.data()[0] - 2.4).abs() < 1e-15 && (out.data()[1] - 3.2).abs() < 1e-15);
        let spec = ProxSpec::new(ProxKind::GroupL21, 6.0, 1.0);
        assert_eq!(prox_step(&spec, &v(&[3.0, 4.0])).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(prox_step(&spec, &v(&[0.0, 0.0])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn linearized_exclusive_hand_values() {
        let spec = ProxSpec::new(ProxKind::ExclusiveL12Linearized, 0.3, 1.0);
        let out = prox_step(&spec, &v(&[1.0, -0.2])).unwrap();
        assert!((out.data()[0] - 0.64).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn exact_exclusive_hand_values() {
        // active set {0}: S = 1 / 1.3, member 1 has 0.2 <= 0.3 S
        let spec = ProxSpec::new(ProxKind::ExclusiveL12, 0.3, 1.0);
        let out = prox_step(&spec, &v(&[1.0, -0.2])).unwrap();
        assert!((out.data()[0] - 1.0 / 1.3).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn exclusive_nonneg() {
        let spec = ProxSpec::new(ProxKind::ExclusiveNonneg, 0.1, 1.0);
        let out = prox_step(&spec, &v(&[1.0, 0.5, 0.1])).unwrap();
        assert!((out.data()[0] - 0.84).abs() < 1e-15);
        assert_eq!(out.data()[2], 0.0);
        assert!(matches!(prox_step(&spec, &v(&[1.0, -0.5])), Err(Error::NegativeInput { index: 1, .. })));
    }

    #[test]
    fn oracle_agrees_on_hand_cases() {
        let l1 = ProxSpec::new(ProxKind::L1, 0.2, 1.0);
        assert!(prox_oracle_check(&l1, &v(&[0.7])).unwrap() < 1e-3);
        let group = ProxSpec::new(ProxKind::GroupL21, 1.0, 1.0);
        assert!(prox_oracle_check(&group, &v(&[3.0, 4.0])).unwrap() < 1e-3);
        let excl = ProxSpec::new(ProxKind::ExclusiveL12, 0.3, 1.0);
        assert!(prox_oracle_check(&excl, &v(&[1.0, -0.2])).unwrap() < 1e-3);
        let lin = ProxSpec::new(ProxKind::ExclusiveL12Linearized, 0.3, 1.0);
        assert!(prox_oracle_check(&lin, &v(&[1.0, -0.2])).unwrap() > 0.1);
    }

    #[test]
    fn zero_strength_is_identity() {
        let w = v(&[0.3, -1.2, 0.0, 2.0]);
        for kind in [ProxKind::L1, ProxKind::GroupL21, ProxKind::ExclusiveL12, ProxKind::ExclusiveL12Linearized] {
            let spec = ProxSpec::new(kind, 0.0, 0.1).with_grouping(Grouping::chunks(4, 2));
            assert_eq!(prox_step(&spec, &w).unwrap(), w);
        }
    }

    #[test]
    fn invalid_specs() {
        let w = v(&[1.0]);
        assert!(prox_step(&ProxSpec::new(ProxKind::L1, -1.0, 1.0), &w).is_err());
        assert!(prox_step(&ProxSpec::new(ProxKind::L1, 1.0, 0.0), &w).is_err());
        let spec = ProxSpec::new(ProxKind::GroupL21, 1.0, 1.0).with_grouping(Grouping(vec![vec![0], vec![0]]));
        assert!(matches!(prox_step(&spec, &w), Err(Error::InvalidGrouping(_))));
    }
}
