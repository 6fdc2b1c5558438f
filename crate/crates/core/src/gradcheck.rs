//! Finite-difference verification of tape gradients.
//!
//! Error metric: `max_i |ad_i - fd_i| / max(||ad||_inf, ||fd||_inf, 1e-8)`,
//! with central differences at step [`FD_STEP`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Tape, Var};
use crate::error::Result;
use crate::normalization::{record_normalize, record_sparse_adjacency, Normalizer, StrengthMap};
use crate::regularizers::{penalty, Grouping, RegularizerKind, RegularizerSpec};
use crate::sparse_param::{record_gates, GateMode, GradMode};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Required gap between any kink and the evaluation point.
pub const KINK_DISTANCE: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Central differences of a scalar function of one tensor.
pub fn central_difference(f: impl Fn(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// A scalar function recorded on a fresh tape from one leaf.
pub trait TapeFn: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>> {}
impl<F> TapeFn for F where F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>> {}

/// Relative error between the tape gradient of `f` at `x` and central differences.
pub fn check(f: &impl TapeFn, x: &Tensor<f64>) -> Result<f64> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);
    let value = |p: &Tensor<f64>| {
        let tape = Tape::new();
        f(tape.leaf(p.clone()))?.value().item()
    };
    let numeric = central_difference(value, x, FD_STEP)?;
    Ok(relative_error(&analytic, &numeric))
}

/// Result of one suite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub points: usize,
    pub max_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Tensor<f64>>;

struct Case {
    name: &'static str,
    sample: Sampler,
    f: Box<dyn Fn(&Tensor<f64>) -> Result<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values with `|x| in [margin, 2]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(margin..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn vec_sampler(n: usize, draw: fn(&mut ChaCha8Rng, usize) -> Vec<f64>) -> Sampler {
    Box::new(move |rng| Tensor::vector(draw(rng, n)).expect("finite sample"))
}

/// Fixed random projection so vector outputs are checked through a scalar.
fn projection(n: usize, salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    Tensor::vector(uniform(&mut rng, n, -1.0, 1.0)).expect("finite")
}

fn project<'t>(y: Var<'t, f64>, salt: u64) -> Result<Var<'t, f64>> {
    let n = y.value().numel();
    let flat = y.reshape(&[n])?;
    let w = y.tape().leaf(projection(n, salt));
    Ok(flat.mul(w)?.sum())
}

fn case(name: &'static str, sample: Sampler, f: impl TapeFn + 'static) -> Case {
    let f = move |x: &Tensor<f64>| check(&f, x);
    Case { name, sample, f: Box::new(f) }
}

fn split<'t>(x: Var<'t, f64>, at: usize, first: &[usize], second: &[usize]) -> Result<(Var<'t, f64>, Var<'t, f64>)> {
    let n = x.value().numel();
    let a = x.gather(&(0..at).collect::<Vec<_>>())?.reshape(first)?;
    let b = x.gather(&(at..n).collect::<Vec<_>>())?.reshape(second)?;
    Ok((a, b))
}

/// Distance of every gate pre-activation from the relu kink.
fn gate_margin(alpha: &[f64], beta: f64, mode: GateMode) -> (f64, bool) {
    let s = 1.0 / (1.0 + (-beta).exp());
    let (strength, mass): (Vec<f64>, f64) = match mode {
        GateMode::Signed => {
            let m = alpha.iter().map(|a| a.abs()).collect::<Vec<_>>();
            let total = m.iter().sum();
            (m, total)
        }
        _ => {
            let g = alpha.iter().map(|a| a.exp()).collect::<Vec<_>>();
            let total = g.iter().sum();
            (g, total)
        }
    };
    let pre: Vec<f64> = strength.iter().map(|g| g - s * mass).collect();
    let margin = pre.iter().map(|p| p.abs()).fold(f64::INFINITY, f64::min);
    (margin, pre.iter().all(|p| *p > 0.0))
}

fn gate_sampler(n: usize, mode: GateMode, grad_mode: GradMode) -> Sampler {
    Box::new(move |rng| loop {
        let alpha = match mode {
            GateMode::Signed => away_from_zero(rng, n, KINK_DISTANCE * 10.0),
            _ => uniform(rng, n, -1.5, 1.5),
        };
        let beta = rng.random_range(-4.0..0.0);
        let (margin, all_alive) = gate_margin(&alpha, beta, mode);
        let some_alive = mode != GateMode::NonnegSoftmax || any_alive(&alpha, beta);
        // rectified backward differs from the true derivative on dead gates
        let alive_ok = grad_mode == GradMode::Exact || all_alive;
        if margin > KINK_DISTANCE && alive_ok && some_alive {
            let mut v = alpha;
            v.push(beta);
            return Tensor::vector(v).expect("finite");
        }
    })
}

fn any_alive(alpha: &[f64], beta: f64) -> bool {
    let s = 1.0 / (1.0 + (-beta).exp());
    let g: Vec<f64> = alpha.iter().map(|a| a.exp()).collect();
    let mass: f64 = g.iter().sum();
    g.iter().any(|x| *x > s * mass)
}

fn gate_fn(n: usize, mode: GateMode, grad_mode: GradMode, salt: u64) -> impl TapeFn {
    move |x: Var<'_, f64>| {
        let alpha = x.gather(&(0..n).collect::<Vec<_>>())?;
        let beta = x.gather(&[n])?;
        let g = record_gates(alpha, beta, mode, grad_mode)?;
        project(g.a, salt)
    }
}

fn adjacency_sampler(n: usize) -> Sampler {
    Box::new(move |rng| loop {
        let alpha = uniform(rng, n * n, -1.0, 1.0);
        let br = uniform(rng, n, -5.0, -2.0);
        let bc = uniform(rng, n, -5.0, -2.0);
        let sig = |b: f64| 1.0 / (1.0 + (-b).exp());
        let g: Vec<f64> = alpha.iter().map(|a| a.exp()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..n {
                let row: f64 = (0..n).map(|k| g[i * n + k]).sum();
                let col: f64 = (0..n).map(|k| g[k * n + j]).sum();
                let pre = g[i * n + j] - sig(br[i]) * row - sig(bc[j]) * col;
                ok &= pre.abs() > KINK_DISTANCE;
            }
        }
        if ok {
            let v = [alpha, br, bc].concat();
            return Tensor::vector(v).expect("finite");
        }
    })
}

fn cases() -> Vec<Case> {
    let mut out = vec![
        case("add", vec_sampler(8, |r, n| uniform(r, n, -2.0, 2.0)), |x| {
            let (a, b) = split(x, 4, &[4], &[4])?;
            project(a.add(b)?, 1)
        }),
        case("sub", vec_sampler(8, |r, n| uniform(r, n, -2.0, 2.0)), |x| {
            let (a, b) = split(x, 4, &[4], &[4])?;
            project(a.sub(b)?, 2)
        }),
        case("mul", vec_sampler(8, |r, n| uniform(r, n, -2.0, 2.0)), |x| {
            let (a, b) = split(x, 4, &[4], &[4])?;
            project(a.mul(b)?, 3)
        }),
        case("div", vec_sampler(8, |r, n| away_from_zero(r, n, 0.5)), |x| {
            let (a, b) = split(x, 4, &[4], &[4])?;
            project(a.div(b)?, 4)
        }),
        case("scalar-broadcast", vec_sampler(5, |r, n| uniform(r, n, -2.0, 2.0)), |x| {
            let (a, b) = split(x, 4, &[4], &[])?;
            project(a.mul(b)?.add_scalar(0.3).mul_scalar(-1.7), 5)
        }),
        case("exp", vec_sampler(6, |r, n| uniform(r, n, -2.0, 2.0)), |x| project(x.exp(), 6)),
        case("log", vec_sampler(6, |r, n| uniform(r, n, 0.2, 3.0)), |x| project(x.log()?, 7)),
        case("abs", vec_sampler(6, |r, n| away_from_zero(r, n, KINK_DISTANCE)), |x| project(x.abs(), 8)),
        case("sigmoid", vec_sampler(6, |r, n| uniform(r, n, -4.0, 4.0)), |x| project(x.sigmoid(), 9)),
        case("relu", vec_sampler(6, |r, n| away_from_zero(r, n, KINK_DISTANCE)), |x| project(x.relu(), 10)),
        case("pow", vec_sampler(6, |r, n| uniform(r, n, 0.1, 2.0)), |x| project(x.pow_nonneg(0.5)?, 11)),
        case("matmul", vec_sampler(20, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            let (a, b) = split(x, 12, &[3, 4], &[4, 2])?;
            project(a.matmul(b)?, 12)
        }),
        case("block-matmul", vec_sampler(21, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            let (a, b) = split(x, 9, &[3, 3], &[6, 2])?;
            project(a.block_matmul(b)?, 13)
        }),
        case("transpose", vec_sampler(6, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            project(x.reshape(&[2, 3])?.transpose()?.exp(), 14)
        }),
        case("sum-mean", vec_sampler(6, |r, n| uniform(r, n, -1.0, 1.0)), |x| x.exp().sum().mul(x.mean())),
        case("sum-axis", vec_sampler(6, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            let m = x.reshape(&[2, 3])?.exp();
            project(concat(&[m.sum_axis(0)?, m.sum_axis(1)?], 0)?, 15)
        }),
        case("concat", vec_sampler(6, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            let (a, b) = split(x, 4, &[2, 2], &[1, 2])?;
            project(concat(&[a.exp(), b.sigmoid()], 0)?, 16)
        }),
        case("row-col-ops", vec_sampler(12, |r, n| uniform(r, n, -1.0, 1.0)), |x| {
            let (m, rest) = split(x, 6, &[2, 3], &[6])?;
            let (r3, c2) = split(rest, 3, &[3], &[3])?;
            let c2 = c2.gather(&[0, 1])?;
            project(m.add_row(r3)?.mul_row(r3)?.add_col(c2)?.mul_col(c2)?, 17)
        }),
        case("safe-l2-norm", vec_sampler(6, |r, n| away_from_zero(r, n, 0.2)), |x| {
            let m = x.reshape(&[2, 3])?;
            let whole = x.safe_l2_norm(None)?;
            project(concat(&[m.safe_l2_norm(Some(1))?, whole.reshape(&[1])?], 0)?, 18)
        }),
        case("softmax-cross-entropy", vec_sampler(12, |r, n| uniform(r, n, -2.0, 2.0)), |x| {
            x.reshape(&[4, 3])?.softmax_cross_entropy(&[0, 2, 1, 2])
        }),
        case("rgf-relu-alive", vec_sampler(6, |r, n| uniform(r, n, KINK_DISTANCE, 2.0)), |x| project(x.rgf_relu(), 19)),
    ];
    for (name, mode, grad) in [
        ("gates-nonneg-softmax", GateMode::NonnegSoftmax, GradMode::Exact),
        ("gates-nonneg-raw", GateMode::NonnegRaw, GradMode::Exact),
        ("gates-signed", GateMode::Signed, GradMode::Exact),
        ("gates-signed-rectified", GateMode::Signed, GradMode::Rectified),
        ("gates-nonneg-rectified", GateMode::NonnegSoftmax, GradMode::Rectified),
    ] {
        out.push(case(name, gate_sampler(5, mode, grad), gate_fn(5, mode, grad, 20)));
    }
    out.push(case("lp-penalty", vec_sampler(6, |r, n| uniform(r, n, KINK_DISTANCE * 10.0, 2.0)), |x| {
        penalty(&RegularizerSpec::new(RegularizerKind::Lp { p: 0.5 }, 1.0), x)
    }));
    out.push(case("group-l21-penalty", vec_sampler(6, |r, n| away_from_zero(r, n, 0.1)), |x| {
        let spec = RegularizerSpec::new(RegularizerKind::GroupL21, 1.0).with_grouping(Grouping::chunks(6, 2));
        penalty(&spec, x)
    }));
    out.push(case("exclusive-l12-penalty", vec_sampler(6, |r, n| away_from_zero(r, n, KINK_DISTANCE * 10.0)), |x| {
        let spec = RegularizerSpec::new(RegularizerKind::ExclusiveL12, 1.0).with_grouping(Grouping::chunks(6, 3));
        penalty(&spec, x)
    }));
    out.push(case("lp-on-softmax-gates", gate_sampler(5, GateMode::NonnegSoftmax, GradMode::Exact), |x| {
        let alpha = x.gather(&[0, 1, 2, 3, 4])?;
        let beta = x.gather(&[5])?;
        let g = record_gates(alpha, beta, GateMode::NonnegSoftmax, GradMode::Exact)?;
        penalty(&RegularizerSpec::new(RegularizerKind::Lp { p: 0.5 }, 1.0), g.a)
    }));
    out.push(case("sinkhorn-unrolled", vec_sampler(9, |r, n| uniform(r, n, 0.2, 2.0)), |x| {
        project(record_normalize(x.reshape(&[3, 3])?, Normalizer::Sinkhorn, 5)?, 21)
    }));
    out.push(case("balanced-unrolled", vec_sampler(9, |r, n| uniform(r, n, 0.2, 2.0)), |x| {
        project(record_normalize(x.reshape(&[3, 3])?, Normalizer::Balanced, 5)?, 22)
    }));
    out.push(case("sparse-adjacency", adjacency_sampler(3), |x| {
        let alpha = x.gather(&(0..9).collect::<Vec<_>>())?.reshape(&[3, 3])?;
        let br = x.gather(&[9, 10, 11])?;
        let bc = x.gather(&[12, 13, 14])?;
        let a = record_sparse_adjacency(alpha, br, bc, GradMode::Exact, StrengthMap::Exp)?;
        project(record_normalize(a, Normalizer::Balanced, 3)?, 23)
    }));
    out
}

/// Run every case at `points` random points drawn from `seed`.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for _ in 0..points {
                let x = (c.sample)(&mut rng);
                worst = worst.max((c.f)(&x)?);
            }
            Ok(SuiteEntry { name: c.name, points, max_error: worst })
        })
        .collect()
}
