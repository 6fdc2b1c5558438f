//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the tape is acyclic and its index order
//! is a topological order; [`Tape::backward`] walks it once in reverse and
//! accumulates gradients additively.
//!
//! Most ops use their exact derivative. A few deliberately do not:
//! [`Var::rgf_relu`] (relu forward, elu backward), [`Var::safe_l2_norm`]
//! (stabilized denominator) and anything registered through
//! [`Tape::custom`]. [`BackwardRule`] tells them apart.
//!
//! Broadcasting is limited to scalar-vs-tensor in the binary ops; the
//! row/column vector ops are explicit kernels.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::{matmul_kernel, Tensor};

/// Negative-side slope of the elu used in the rectified backward pass.
pub const ELU_ALPHA: f64 = 0.1;

/// Constant added to the norm in the backward pass of [`Var::safe_l2_norm`].
pub const SAFE_NORM_EPS: f64 = 1e-19;

/// Backward of a custom op: `(upstream, inputs, output) -> input gradients`.
pub type CustomBackward<T> = Rc<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardRule {
    Exact,
    Custom(&'static str),
}

type Id = usize;

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    AddScalar(Id),
    MulScalar(Id, T),
    Exp(Id),
    Log(Id),
    Abs(Id),
    Sign(Id),
    Sigmoid(Id),
    Relu(Id),
    RgfRelu(Id),
    PowNonneg(Id, T),
    Matmul(Id, Id),
    BlockMatmul(Id, Id),
    Transpose(Id),
    Sum(Id),
    Mean(Id),
    SumAxis(Id, usize),
    Reshape(Id),
    Concat(Vec<Id>, usize),
    Gather(Id, Rc<[usize]>),
    AddRow(Id, Id),
    AddCol(Id, Id),
    MulRow(Id, Id),
    MulCol(Id, Id),
    SafeL2Norm(Id, Option<usize>),
    SoftmaxCrossEntropy(Id, Rc<[usize]>),
    Custom(Vec<Id>, &'static str, CustomBackward<T>),
}

impl<T> Op<T> {
    fn rule(&self) -> BackwardRule {
        match self {
            Op::RgfRelu(_) => BackwardRule::Custom("rgf_relu"),
            Op::SafeL2Norm(..) => BackwardRule::Custom("safe_l2_norm"),
            Op::Custom(_, name, _) => BackwardRule::Custom(name),
            _ => BackwardRule::Exact,
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn reached(&self, v: Var<'_, T>) -> bool {
        self.grads[v.id].is_some()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

/// Elementwise binary op with scalar broadcasting on either side.
fn broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.is_scalar_like() {
        let s = b.data()[0];
        return Ok(a.map(|x| f(x, s)));
    }
    if a.is_scalar_like() {
        let s = a.data()[0];
        return Ok(b.map(|x| f(s, x)));
    }
    Err(shape_err(op, a.shape(), b.shape()))
}

/// Reduce an upstream gradient to the shape of an operand that may have
/// been broadcast from a scalar.
fn unbroadcast<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::raw(shape.to_vec(), vec![g.sum()])
    }
}

/// (outer, axis_len, inner) strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn sum_along<T: Scalar>(x: &Tensor<T>, axis: usize, f: impl Fn(T) -> T) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[o * inner + i] += f(d[(o * len + k) * inner + i]);
            }
        }
    }
    Tensor::raw(without_axis(x.shape(), axis), out)
}

/// Expand a reduced tensor back along `axis` and combine with `x` elementwise.
fn expand_along<T: Scalar>(reduced: &Tensor<T>, x: &Tensor<T>, axis: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let r = reduced.data();
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                let idx = (o * len + k) * inner + i;
                out[idx] = f(r[o * inner + i], d[idx]);
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

fn elu_derivative<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        T::lit(ELU_ALPHA) * x.exp()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: Id) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Record a leaf (parameter, input or constant).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(v))
    }

    /// Register an op whose backward pass is supplied by the caller.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var<'t, T> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom(ids, name, backward))
    }

    pub fn backward_rule(&self, v: Var<'_, T>) -> BackwardRule {
        self.nodes.borrow()[v.id].op.rule()
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::NonScalarRoot);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: Id| -> &Tensor<T> { &nodes[i].value };
            let contributions: Vec<(Id, Tensor<T>)> = match &node.op {
                Op::Leaf => Vec::new(),
                Op::Add(a, b) => {
                    vec![(*a, unbroadcast(g.clone(), val(*a).shape())), (*b, unbroadcast(g, val(*b).shape()))]
                }
                Op::Sub(a, b) => vec![
                    (*a, unbroadcast(g.clone(), val(*a).shape())),
                    (*b, unbroadcast(g.map(|v| -v), val(*b).shape())),
                ],
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let ga = broadcast(&g, y, "mul", |g, y| g * y)?;
                    let gb = broadcast(&g, x, "mul", |g, x| g * x)?;
                    vec![(*a, unbroadcast(ga, x.shape())), (*b, unbroadcast(gb, y.shape()))]
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let ga = broadcast(&g, y, "div", |g, y| g / y)?;
                    // d(x/y)/dy = -out / y
                    let gy = broadcast(&g, out, "div", |g, o| g * o)?;
                    let gb = broadcast(&gy, y, "div", |v, y| -v / y)?;
                    vec![(*a, unbroadcast(ga, x.shape())), (*b, unbroadcast(gb, y.shape()))]
                }
                Op::AddScalar(a) => vec![(*a, g)],
                Op::MulScalar(a, c) => vec![(*a, g.map(|v| v * *c))],
                Op::Exp(a) => vec![(*a, g.zip_map(out, |g, y| g * y)?)],
                Op::Log(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x)?)],
                Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * scalar::sign(x))?)],
                Op::Sign(a) => vec![(*a, Tensor::zeros(val(*a).shape()))],
                Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, s| g * s * (T::one() - s))?)],
                Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })?)],
                Op::RgfRelu(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * elu_derivative(x))?)],
                Op::PowNonneg(a, p) => {
                    let p = *p;
                    vec![(
                        *a,
                        g.zip_map(
                            val(*a),
                            |g, x| {
                                if x > T::zero() {
                                    g * p * x.powf(p - T::one())
                                } else {
                                    T::zero()
                                }
                            },
                        )?,
                    )]
                }
                Op::Matmul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    vec![(*a, g.matmul(&y.transpose()?)?), (*b, x.transpose()?.matmul(&g)?)]
                }
                Op::BlockMatmul(a, b) => {
                    let (adj, x) = (val(*a), val(*b));
                    let n = adj.rows();
                    let f = x.cols();
                    let blocks = x.rows() / n;
                    let at = adj.transpose()?;
                    let mut ga = vec![T::zero(); n * n];
                    let mut gx = Vec::with_capacity(x.numel());
                    for blk in 0..blocks {
                        let gb = &g.data()[blk * n * f..(blk + 1) * n * f];
                        let xb = &x.data()[blk * n * f..(blk + 1) * n * f];
                        // dA += g_b x_b^T
                        for i in 0..n {
                            for j in 0..n {
                                let mut s = T::zero();
                                for c in 0..f {
                                    s += gb[i * f + c] * xb[j * f + c];
                                }
                                ga[i * n + j] += s;
                            }
                        }
                        gx.extend(matmul_kernel(at.data(), gb, n, n, f));
                    }
                    vec![(*a, Tensor::raw(vec![n, n], ga)), (*b, Tensor::raw(x.shape().to_vec(), gx))]
                }
                Op::Transpose(a) => vec![(*a, g.transpose()?)],
                Op::Sum(a) => {
                    let s = g.data()[0];
                    vec![(*a, Tensor::full(val(*a).shape(), s))]
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let s = g.data()[0] / T::from_usize(x.numel()).unwrap();
                    vec![(*a, Tensor::full(x.shape(), s))]
                }
                Op::SumAxis(a, axis) => {
                    vec![(*a, expand_along(&g, val(*a), *axis, |r, _| r))]
                }
                Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
                Op::Concat(ids, axis) => {
                    let (outer, _, inner) = axis_split(out.shape(), *axis);
                    let total = out.shape()[*axis];
                    let mut offset = 0;
                    let mut parts = Vec::with_capacity(ids.len());
                    for &i in ids {
                        let xs = val(i).shape();
                        let len = xs[*axis];
                        let mut d = Vec::with_capacity(val(i).numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        offset += len;
                        parts.push((i, Tensor::raw(xs.to_vec(), d)));
                    }
                    parts
                }
                Op::Gather(a, idx) => {
                    let x = val(*a);
                    let mut d = vec![T::zero(); x.numel()];
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += g.data()[k];
                    }
                    vec![(*a, Tensor::raw(x.shape().to_vec(), d))]
                }
                Op::AddRow(m, v) => {
                    let gv = Tensor::raw(val(*v).shape().to_vec(), g.col_sums());
                    vec![(*m, g), (*v, gv)]
                }
                Op::AddCol(m, v) => {
                    let gv = Tensor::raw(val(*v).shape().to_vec(), g.row_sums());
                    vec![(*m, g), (*v, gv)]
                }
                Op::MulRow(m, v) => {
                    let (x, s) = (val(*m), val(*v));
                    let c = x.cols();
                    let mut gm = g.clone();
                    let mut gv = vec![T::zero(); c];
                    for (grow, xrow) in gm.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                        for j in 0..c {
                            gv[j] += grow[j] * xrow[j];
                            grow[j] *= s.data()[j];
                        }
                    }
                    vec![(*m, gm), (*v, Tensor::raw(s.shape().to_vec(), gv))]
                }
                Op::MulCol(m, v) => {
                    let (x, s) = (val(*m), val(*v));
                    let c = x.cols();
                    let mut gm = g.clone();
                    let mut gv = vec![T::zero(); x.rows()];
                    for (i, (grow, xrow)) in gm.data_mut().chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
                        let si = s.data()[i];
                        for j in 0..c {
                            gv[i] += grow[j] * xrow[j];
                            grow[j] *= si;
                        }
                    }
                    vec![(*m, gm), (*v, Tensor::raw(s.shape().to_vec(), gv))]
                }
                Op::SafeL2Norm(a, axis) => {
                    let x = val(*a);
                    let eps = T::lit(SAFE_NORM_EPS);
                    let gx = match axis {
                        None => {
                            let (gs, n) = (g.data()[0], out.data()[0]);
                            x.map(|v| gs * (v / (n + eps)))
                        }
                        Some(ax) => {
                            let denom = out.map(|n| n + eps);
                            let ratio = expand_along(&denom, x, *ax, |d, v| v / d);
                            let up = expand_along(&g, x, *ax, |gv, _| gv);
                            up.zip_map(&ratio, |u, r| u * r)?
                        }
                    };
                    vec![(*a, gx)]
                }
                Op::SoftmaxCrossEntropy(a, labels) => {
                    let x = val(*a);
                    let (b, c) = (x.rows(), x.cols());
                    let scale = g.data()[0] / T::from_usize(b).unwrap();
                    let mut d = vec![T::zero(); b * c];
                    for (i, row) in x.data().chunks(c).enumerate() {
                        let p = softmax_row(row);
                        for j in 0..c {
                            let onehot = if labels[i] == j { T::one() } else { T::zero() };
                            d[i * c + j] = scale * (p[j] - onehot);
                        }
                    }
                    vec![(*a, Tensor::raw(vec![b, c], d))]
                }
                Op::Custom(ids, _, bw) => {
                    let inputs: Vec<&Tensor<T>> = ids.iter().map(|&i| val(i)).collect();
                    let gs = bw(&g, &inputs, out);
                    if gs.len() != ids.len() {
                        return Err(Error::InvalidArgument(
                            "custom backward returned wrong number of gradients".into(),
                        ));
                    }
                    ids.iter().copied().zip(gs).collect()
                }
            };
            for (input, contrib) in contributions {
                if contrib.shape() != val(input).shape() {
                    return Err(shape_err("gradient", contrib.shape(), val(input).shape()));
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = broadcast(&self.value(), &other.value(), "add", |a, b| a + b)?;
        Ok(self.unary(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = broadcast(&self.value(), &other.value(), "sub", |a, b| a - b)?;
        Ok(self.unary(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = broadcast(&self.value(), &other.value(), "mul", |a, b| a * b)?;
        Ok(self.unary(v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise division; any exact zero in the divisor is an error.
    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let d = other.value();
        if d.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero);
        }
        let v = broadcast(&self.value(), &d, "div", |a, b| a / b)?;
        Ok(self.unary(v, Op::Div(self.id, other.id)))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::MulScalar(self.id, c))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    pub fn exp(&self) -> Var<'t, T> {
        let v = self.value().map(T::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn log(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some((index, v)) = x.data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
            return Err(Error::InvalidArgument(format!("log of non-positive value {v} at index {index}")));
        }
        Ok(self.unary(x.map(T::ln), Op::Log(self.id)))
    }

    pub fn abs(&self) -> Var<'t, T> {
        let v = self.value().map(T::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// Three-valued sign. Its backward pass is zero everywhere.
    pub fn sign(&self) -> Var<'t, T> {
        let v = self.value().map(scalar::sign);
        self.unary(v, Op::Sign(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(scalar::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// `max(x, 0)` with subgradient 0 at the kink.
    pub fn relu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    /// Relu in the forward pass, derivative of `elu(x; 0.1)` in the backward pass.
    pub fn rgf_relu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::RgfRelu(self.id))
    }

    /// `x^p` on non-negative input. Exact zeros map to 0 with zero gradient,
    /// for every exponent, so negative `p` doubles as a guarded reciprocal.
    pub fn pow_nonneg(&self, p: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some((index, v)) = x.data().iter().enumerate().find(|(_, v)| **v < T::zero()) {
            return Err(Error::NegativeInput { index, value: v.to_f64_lossy() });
        }
        let v = x.map(|x| if x > T::zero() { x.powf(p) } else { T::zero() });
        Ok(self.unary(v, Op::PowNonneg(self.id, p)))
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.unary(v, Op::Matmul(self.id, other.id)))
    }

    /// Apply the `n x n` matrix `self` to each consecutive `n`-row block of
    /// `x`: `out[b*n + i, f] = sum_j self[i, j] * x[b*n + j, f]`.
    pub fn block_matmul(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&x);
        let (a, xv) = (self.value(), x.value());
        if a.rank() != 2 || a.rows() != a.cols() || xv.rank() != 2 || xv.rows() % a.rows() != 0 {
            return Err(shape_err("block_matmul", a.shape(), xv.shape()));
        }
        let n = a.rows();
        let f = xv.cols();
        let mut out = Vec::with_capacity(xv.numel());
        for block in xv.data().chunks(n * f) {
            out.extend(matmul_kernel(a.data(), block, n, n, f));
        }
        let v = Tensor::raw(xv.shape().to_vec(), out);
        Ok(self.unary(v, Op::BlockMatmul(self.id, x.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / T::from_usize(x.numel()).unwrap());
        self.unary(v, Op::Mean(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let v = sum_along(&x, axis, |v| v);
        Ok(self.unary(v, Op::SumAxis(self.id, axis)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Pick elements by flat index into a rank-1 result.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Shape(format!("gather index {bad} out of range {}", x.numel())));
        }
        let v = Tensor::raw(vec![indices.len()], indices.iter().map(|&i| x.data()[i]).collect());
        Ok(self.unary(v, Op::Gather(self.id, indices.into())))
    }

    /// `m[i, j] + v[j]`.
    pub fn add_row(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_op(v, true)
    }

    /// `m[i, j] * v[j]`.
    pub fn mul_row(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_op(v, false)
    }

    /// `m[i, j] + v[i]`.
    pub fn add_col(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.col_op(v, true)
    }

    /// `m[i, j] * v[i]`.
    pub fn mul_col(&self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        self.col_op(v, false)
    }

    fn row_op(&self, v: Var<'t, T>, add: bool) -> Result<Var<'t, T>> {
        self.same_tape(&v);
        let (m, s) = (self.value(), v.value());
        if m.rank() != 2 || s.numel() != m.cols() {
            return Err(shape_err("row op", m.shape(), s.shape()));
        }
        let c = m.cols();
        let mut d = m.data().to_vec();
        for row in d.chunks_mut(c) {
            for (x, &sv) in row.iter_mut().zip(s.data()) {
                if add {
                    *x += sv
                } else {
                    *x *= sv
                }
            }
        }
        let out = Tensor::raw(m.shape().to_vec(), d);
        let op = if add { Op::AddRow(self.id, v.id) } else { Op::MulRow(self.id, v.id) };
        Ok(self.unary(out, op))
    }

    fn col_op(&self, v: Var<'t, T>, add: bool) -> Result<Var<'t, T>> {
        self.same_tape(&v);
        let (m, s) = (self.value(), v.value());
        if m.rank() != 2 || s.numel() != m.rows() {
            return Err(shape_err("col op", m.shape(), s.shape()));
        }
        let c = m.cols();
        let mut d = m.data().to_vec();
        for (row, &sv) in d.chunks_mut(c).zip(s.data()) {
            for x in row.iter_mut() {
                if add {
                    *x += sv
                } else {
                    *x *= sv
                }
            }
        }
        let out = Tensor::raw(m.shape().to_vec(), d);
        let op = if add { Op::AddCol(self.id, v.id) } else { Op::MulCol(self.id, v.id) };
        Ok(self.unary(out, op))
    }

    /// Euclidean norm over all elements or along one axis. The backward pass
    /// divides by `norm + 1e-19`, so it stays finite on all-zero input.
    pub fn safe_l2_norm(&self, axis: Option<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let v = match axis {
            None => Tensor::scalar(x.data().iter().map(|&v| v * v).sum::<T>().sqrt()),
            Some(ax) if ax < x.rank() => sum_along(&x, ax, |v| v * v).map(T::sqrt),
            Some(ax) => return Err(Error::Shape(format!("axis {ax} out of range for {:?}", x.shape()))),
        };
        Ok(self.unary(v, Op::SafeL2Norm(self.id, axis)))
    }

    /// Mean cross-entropy of row-wise softmax over `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.rows() != labels.len() || labels.iter().any(|&l| l >= x.cols()) {
            return Err(Error::Shape(format!("cross entropy logits {:?} with {} labels", x.shape(), labels.len())));
        }
        let c = x.cols();
        let mut total = T::zero();
        for (row, &l) in x.data().chunks(c).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            total += lse - row[l];
        }
        let v = Tensor::scalar(total / T::from_usize(labels.len()).unwrap());
        Ok(self.unary(v, Op::SoftmaxCrossEntropy(self.id, labels.into())))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
            return Err(shape_err("concat", &base, s));
        }
    }
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.push(Tensor::raw(shape, data), Op::Concat(ids, axis)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[1.0, 2.0, 3.0]));
        let loss = w.mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[1.0, 2.0]));
        let c = tape.scalar(4.0);
        let g = tape.backward(c).unwrap();
        assert!(!g.reached(w));
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_kink() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[-1.0, 0.0, 2.0]));
        let r = w.relu();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(r.sum()).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_relu_is_dead() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[-3.0, -0.5]));
        let r = w.relu();
        assert_eq!(r.value().data(), &[0.0, 0.0]);
        assert_eq!(tape.backward(r.sum()).unwrap().wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[1.0, 2.0]));
        let err = tape.backward(w.exp()).err().unwrap();
        assert_eq!(err.to_string(), "backward requires scalar root");
    }

    #[test]
    fn rgf_relu_forward_is_relu_backward_is_elu() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[-1.0, 0.5, 2.0]));
        let y = x.rgf_relu();
        assert_eq!(y.value().data(), &[0.0, 0.5, 2.0]);
        let up = tape.leaf(t(&[1.0, 1.0, 3.0]));
        let g = tape.backward(y.mul(up).unwrap().sum()).unwrap();
        let gx = g.wrt(x);
        assert!((gx.data()[0] - 0.1 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((gx.data()[0] - 0.036_787_944_117_144_23).abs() < 1e-12);
        assert_eq!(gx.data()[2], 3.0);
        assert_eq!(tape.backward_rule(y), BackwardRule::Custom("rgf_relu"));
        assert_eq!(tape.backward_rule(x.relu()), BackwardRule::Exact);
    }

    #[test]
    fn safe_norm_is_finite_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3.0, 4.0]));
        let n = x.safe_l2_norm(None).unwrap();
        assert_eq!(n.value().item().unwrap(), 5.0);
        let g = tape.backward(n).unwrap().wrt(x);
        assert!((g.data()[0] - 0.6).abs() < 1e-15 && (g.data()[1] - 0.8).abs() < 1e-15);

        let tape = Tape::new();
        let z = tape.leaf(t(&[0.0, 0.0]));
        let n = z.safe_l2_norm(None).unwrap();
        assert_eq!(n.value().item().unwrap(), 0.0);
        assert_eq!(tape.backward(n).unwrap().wrt(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn safe_norm_along_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
        let n = x.safe_l2_norm(Some(1)).unwrap();
        assert_eq!(n.value().data(), &[5.0, 0.0]);
        let g = tape.backward(n.sum()).unwrap().wrt(x);
        assert!(g.data().iter().all(|v| v.is_finite()));
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(&g.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn sign_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[-2.0, 0.0, 5.0]));
        let s = x.sign();
        assert_eq!(s.value().data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(tape.backward(s.sum()).unwrap().wrt(x).data(), &[0.0; 3]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        assert_eq!(tape.scalar(0.0).sigmoid().value().item().unwrap(), 0.5);
    }

    #[test]
    fn division_by_exact_zero_and_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]));
        let z = tape.leaf(t(&[1.0, 0.0]));
        assert_eq!(a.div(z).unwrap_err(), Error::DivisionByZero);
        let b = tape.leaf(t(&[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(Error::Shape(_))));
        // scalar broadcast is allowed
        assert!(a.add(tape.scalar(1.0)).is_ok());
    }

    #[test]
    fn accumulation_is_additive() {
        let x0 = t(&[0.3, -1.2, 2.0]);
        let single = {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let f = x.mul(x).unwrap().sigmoid().sum();
            tape.backward(f).unwrap().wrt(x)
        };
        let tape = Tape::new();
        let x = tape.leaf(x0);
        let f1 = x.mul(x).unwrap().sigmoid().sum();
        let f2 = x.mul(x).unwrap().sigmoid().sum();
        let double = tape.backward(f1.add(f2).unwrap()).unwrap().wrt(x);
        for (d, s) in double.data().iter().zip(single.data()) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.add(x).unwrap().add(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item().unwrap(), 3.0);
    }

    #[test]
    fn concat_and_gather_roundtrip_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let picked = c.gather(&[0, 4, 4]).unwrap();
        let g = tape.backward(picked.sum()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 0.0]);
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn pow_nonneg_zero_convention() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[0.0, 4.0]));
        let y = x.pow_nonneg(0.5).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0]);
        let g = tape.backward(y.sum()).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 0.25]);
        let r = x.pow_nonneg(-1.0).unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.25]);
        assert!(tape.leaf(t(&[-1.0])).pow_nonneg(0.5).is_err());
    }

    #[test]
    fn custom_op_uses_supplied_backward() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        // identity forward, doubled backward
        let y = tape.custom(
            "double_grad",
            &[x],
            (*x.value()).clone(),
            Rc::new(|g: &Tensor<f64>, _: &[&Tensor<f64>], _: &Tensor<f64>| vec![g.map(|v| 2.0 * v)]),
        );
        assert_eq!(tape.backward_rule(y), BackwardRule::Custom("double_grad"));
        assert_eq!(tape.backward(y.sum()).unwrap().wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let l = logits.softmax_cross_entropy(&[1]).unwrap();
        assert!((l.value().item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(l).unwrap().wrt(logits);
        assert_eq!(g.data(), &[0.5, -0.5]);
    }
}
