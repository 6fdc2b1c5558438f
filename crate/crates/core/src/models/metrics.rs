//! Prediction errors and the learned-relationship score.

use std::collections::VecDeque;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_targets<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    match target.data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
        Some((index, v)) => Err(Error::NonPositiveTarget { index, value: v.to_f64_lossy() }),
        None => Ok(()),
    }
}

/// Mean of `|pred - target| / target`.
pub fn mre<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_targets(target)?;
    let rel = pred.zip_map(target, |p, y| (p - y).abs() / y)?;
    Ok(rel.sum() / T::from_usize(rel.numel()).unwrap())
}

/// `100 * mre`.
pub fn mape<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(mre(pred, target)? * T::lit(100.0))
}

/// Mean relative error recorded on the tape.
pub fn mre_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    check_targets(target)?;
    if pred.value().shape() != target.shape() {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.value().shape(), target.shape())));
    }
    let inv = pred.tape().leaf(target.map(|y| T::one() / y));
    let diff = pred.sub(pred.tape().leaf(target.clone()))?;
    Ok(diff.abs().mul(inv)?.mean())
}

/// Hop distances of an unweighted graph given by the nonzero pattern of a
/// square matrix; `usize::MAX` marks unreachable pairs.
pub fn geodesic_distances<T: Scalar>(adjacency: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    if adjacency.rank() != 2 || adjacency.rows() != adjacency.cols() {
        return Err(Error::Shape(format!("adjacency must be square, got {:?}", adjacency.shape())));
    }
    let n = adjacency.rows();
    let neighbours: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && adjacency.at2(i, j) != T::zero()).collect()).collect();
    Ok((0..n)
        .map(|s| {
            let mut dist = vec![usize::MAX; n];
            dist[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &v in &neighbours[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            dist
        })
        .collect())
}

/// Mask `M^k` with ones where the hop distance is at most `k`.
pub fn hop_mask(geodesic: &[Vec<usize>], k: usize) -> Vec<Vec<bool>> {
    geodesic.iter().map(|row| row.iter().map(|&d| d <= k).collect()).collect()
}

/// `(1 / 2N) * sum((A^r + A^c) * M^k)` where `A^r`, `A^c` are the row- and
/// column-normalized copies of `a`. Always within `[0, 1]`.
///
/// Each row term is evaluated as `(sum_j a_ij m_ij) / (sum_j a_ij)`, so a
/// matrix supported inside the mask scores exactly 1. All-zero lines add 0.
pub fn relationship_score<T: Scalar>(a: &Tensor<T>, k: usize, geodesic: &[Vec<usize>]) -> Result<f64> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n || geodesic.len() != n || geodesic.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("score of {:?} with {}-node geodesics", a.shape(), geodesic.len())));
    }
    if let Some((index, v)) = a.data().iter().enumerate().find(|(_, v)| **v < T::zero()) {
        return Err(Error::NegativeInput { index, value: v.to_f64_lossy() });
    }
    let mask = hop_mask(geodesic, k);
    let fraction = |inside: f64, total: f64| if total > 0.0 { inside / total } else { 0.0 };
    let mut total = 0.0;
    for i in 0..n {
        let mut inside = 0.0;
        let mut all = 0.0;
        for j in 0..n {
            let v = a.at2(i, j).to_f64_lossy();
            all += v;
            inside += if mask[i][j] { v } else { 0.0 };
        }
        total += fraction(inside, all);
    }
    for j in 0..n {
        let mut inside = 0.0;
        let mut all = 0.0;
        for i in 0..n {
            let v = a.at2(i, j).to_f64_lossy();
            all += v;
            inside += if mask[i][j] { v } else { 0.0 };
        }
        total += fraction(inside, all);
    }
    Ok(total / (2 * n) as f64)
}
