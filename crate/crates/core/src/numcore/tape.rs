//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Var::backward`] walks the
//! tape in reverse and accumulates gradients on the leaves that were created
//! with `requires_grad`. A fresh tape is built for every training step.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};
use crate::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    LogSumExp(usize, usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Transpose(usize),
    StraightThrough(usize),
    Reshape(usize),
    PairwiseLogNormal(usize, usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that is held constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Result<Option<Tensor<T>>> {
        if var.tape.id != self.id {
            return Err(Error::ForeignTape);
        }
        Ok(self.nodes.borrow()[var.id].grad.clone())
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn require_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if self.tape.id != other.tape.id {
            Err(Error::ForeignTape)
        } else {
            Ok(())
        }
    }

    fn rg2(&self, other: &Var<'_, T>) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].requires_grad || nodes[other.id].requires_grad
    }

    fn unary(&self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            (node.value.map(f), node.requires_grad)
        };
        self.tape.push(name, value, op, rg)
    }

    fn elementwise(&self, other: Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            a.zip_map(b, f)?
        };
        let rg = self.rg2(&other);
        self.tape.push(name, value, op, rg)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        let rg = self.rg2(&other);
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id), rg)
    }

    fn row_broadcast(&self, row: Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_tape(&row)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
            let (r, c) = require_matrix(name, a.shape())?;
            if b.shape() != [1, c] {
                return Err(mismatch(name, a.shape(), b.shape()));
            }
            let brow = b.data();
            let mut out = a.data().to_vec();
            for i in 0..r {
                for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(brow) {
                    *o = f(*o, bv);
                }
            }
            Tensor::new([r, c], out)?
        };
        let rg = self.rg2(&row);
        self.tape.push(name, value, op, rg)
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&self, row: Var<'t, T>) -> Result<Self> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a `1×c` row.
    pub fn mul_row(&self, row: Var<'t, T>) -> Result<Self> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.unary("scale", Op::Scale(self.id, s), |v| v * s)
    }

    /// Adds a constant to every element.
    pub fn offset(&self, c: T) -> Result<Self> {
        self.unary("offset", Op::Offset(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary("tanh", Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", Op::Exp(self.id), |v| v.exp())
    }

    pub fn log(&self) -> Result<Self> {
        if self.value().data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain { op: "log" });
        }
        self.unary("log", Op::Log(self.id), |v| v.ln())
    }

    pub fn square(&self) -> Result<Self> {
        self.unary("square", Op::Square(self.id), |v| v * v)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Self> {
        self.unary("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn sum(&self) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            (Tensor::scalar(nodes[self.id].value.sum()), nodes[self.id].requires_grad)
        };
        self.tape.push("sum", value, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let n = T::of(v.len() as f64);
            (Tensor::scalar(v.sum() / n), nodes[self.id].requires_grad)
        };
        self.tape.push("mean", value, Op::Mean(self.id), rg)
    }

    /// Sum over `axis` of a matrix, keeping the reduced dimension as 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (r, c) = require_matrix("sum_axis", v.shape())?;
            let out = match axis {
                0 => {
                    let mut acc = vec![T::zero(); c];
                    for i in 0..r {
                        for (a, &x) in acc.iter_mut().zip(v.row(i)) {
                            *a += x;
                        }
                    }
                    Tensor::new([1, c], acc)?
                }
                1 => Tensor::new([r, 1], (0..r).map(|i| v.row(i).iter().copied().sum()).collect())?,
                _ => return Err(Error::InvalidArgument(format!("axis {axis} for a matrix"))),
            };
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push("sum_axis", value, Op::SumAxis(self.id, axis), rg)
    }

    /// Numerically stable `log Σ exp` over `axis`, keeping the reduced dimension.
    pub fn logsumexp(&self, axis: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (r, c) = require_matrix("logsumexp", v.shape())?;
            let lse = |xs: &mut dyn Iterator<Item = T>, buf: &mut Vec<T>| {
                buf.clear();
                buf.extend(xs);
                let m = buf.iter().copied().fold(T::neg_infinity(), T::max);
                m + buf.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
            };
            let mut buf = Vec::new();
            let out = match axis {
                0 => Tensor::new(
                    [1, c],
                    (0..c)
                        .map(|j| lse(&mut (0..r).map(|i| v.get(i, j)), &mut buf))
                        .collect(),
                )?,
                1 => Tensor::new(
                    [r, 1],
                    (0..r).map(|i| lse(&mut v.row(i).iter().copied(), &mut buf)).collect(),
                )?,
                _ => return Err(Error::InvalidArgument(format!("axis {axis} for a matrix"))),
            };
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push("logsumexp", value, Op::LogSumExp(self.id, axis), rg)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            require_matrix("transpose", v.shape())?;
            (v.transpose(), nodes[self.id].requires_grad)
        };
        self.tape.push("transpose", value, Op::Transpose(self.id), rg)
    }

    /// Columns or rows `[start, start + len)` of a matrix.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (r, c) = require_matrix("slice", v.shape())?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || len == 0 || start + len > extent {
                return Err(Error::InvalidArgument(format!(
                    "slice axis {axis} [{start}, {}) of {:?}",
                    start + len,
                    v.shape()
                )));
            }
            let out = if axis == 0 {
                Tensor::new([len, c], v.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut d = Vec::with_capacity(r * len);
                for i in 0..r {
                    d.extend_from_slice(&v.row(i)[start..start + len]);
                }
                Tensor::new([r, len], d)?
            };
            (out, nodes[self.id].requires_grad)
        };
        self.tape.push("slice", value, Op::Slice(self.id, axis, start), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let v = nodes[self.id].value.clone().reshape(shape.to_vec())?;
            (v, nodes[self.id].requires_grad)
        };
        self.tape.push("reshape", value, Op::Reshape(self.id), rg)
    }

    /// Per-dimension Gaussian log-densities of every row of `self` (`B×d`)
    /// under every row of the diagonal Gaussians (`mu`, `logvar`: `N×d`).
    /// Output is `B×(d·N)` with entry `[i, k·N + j] = log N(x_ik; mu_jk, exp(logvar_jk))`.
    pub fn pairwise_log_normal(&self, mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Self> {
        self.same_tape(&mu)?;
        self.same_tape(&logvar)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, m, lv) = (&nodes[self.id].value, &nodes[mu.id].value, &nodes[logvar.id].value);
            let (b, d) = require_matrix("pairwise_log_normal", x.shape())?;
            let (n, dm) = require_matrix("pairwise_log_normal", m.shape())?;
            if dm != d {
                return Err(mismatch("pairwise_log_normal", x.shape(), m.shape()));
            }
            if lv.shape() != m.shape() {
                return Err(mismatch("pairwise_log_normal", m.shape(), lv.shape()));
            }
            let half = T::of(0.5);
            let ln_2pi = T::of((2.0 * std::f64::consts::PI).ln());
            let mut out = Vec::with_capacity(b * d * n);
            for i in 0..b {
                for k in 0..d {
                    let xik = x.get(i, k);
                    for j in 0..n {
                        let l = lv.get(j, k);
                        let diff = xik - m.get(j, k);
                        out.push(-half * (diff * diff * (-l).exp() + l + ln_2pi));
                    }
                }
            }
            let rg = nodes[self.id].requires_grad || nodes[mu.id].requires_grad || nodes[logvar.id].requires_grad;
            (Tensor::new([b, d * n], out)?, rg)
        };
        self.tape.push(
            "pairwise_log_normal",
            value,
            Op::PairwiseLogNormal(self.id, mu.id, logvar.id),
            rg,
        )
    }

    /// Forward value rounded to {0, 1}; gradient passes through unchanged.
    pub fn straight_through_round(&self) -> Result<Self> {
        self.unary("straight_through", Op::StraightThrough(self.id), |v| {
            if v >= T::of(0.5) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Reverse pass from this scalar, accumulating into leaf gradients.
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarBackward(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NoGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for idx in (0..=self.id).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, contrib: Vec<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            let y = &node.value;
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.into_iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    if nodes[*a].requires_grad {
                        let mut da = vec![T::zero(); n * k];
                        gemm_nt(&g, bv.data(), &mut da, n, m, k);
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); k * m];
                        gemm_tn(av.data(), &g, &mut db, k, n, m);
                        send(*b, db);
                    }
                }
                Op::AddRow(a, b) => {
                    let c = y.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    send(*a, g);
                    send(*b, db);
                }
                Op::MulRow(a, b) => {
                    let c = y.cols();
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut da = Vec::with_capacity(g.len());
                    let mut db = vec![T::zero(); c];
                    for (grow, arow) in g.chunks(c).zip(av.chunks(c)) {
                        for j in 0..c {
                            da.push(grow[j] * bv[j]);
                            db[j] += grow[j] * arow[j];
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(a, s) => send(*a, g.into_iter().map(|v| v * *s).collect()),
                Op::Offset(a) | Op::StraightThrough(a) | Op::Reshape(a) => send(*a, g),
                Op::PairwiseLogNormal(x, mu, lv) => {
                    let (xv, muv, lvv) = (val(*x), val(*mu), val(*lv));
                    let (b, d, n) = (xv.rows(), xv.cols(), muv.rows());
                    let mut dx = vec![T::zero(); b * d];
                    let mut dmu = vec![T::zero(); n * d];
                    let mut dlv = vec![T::zero(); n * d];
                    let half = T::of(0.5);
                    for i in 0..b {
                        for k in 0..d {
                            let xik = xv.get(i, k);
                            let grow = &g[(i * d + k) * n..(i * d + k + 1) * n];
                            let mut acc = T::zero();
                            for (j, &gv) in grow.iter().enumerate() {
                                let prec = (-lvv.get(j, k)).exp();
                                let diff = xik - muv.get(j, k);
                                acc -= gv * diff * prec;
                                dmu[j * d + k] += gv * diff * prec;
                                dlv[j * d + k] += gv * (half * diff * diff * prec - half);
                            }
                            dx[i * d + k] = acc;
                        }
                    }
                    send(*x, dx);
                    send(*mu, dmu);
                    send(*lv, dlv);
                }
                Op::Relu(a) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                            .collect(),
                    );
                }
                Op::Tanh(a) => send(
                    *a,
                    g.iter().zip(y.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                ),
                Op::Sigmoid(a) => send(
                    *a,
                    g.iter().zip(y.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                ),
                Op::Exp(a) => send(*a, g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect()),
                Op::Log(a) => send(*a, g.iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect()),
                Op::Square(a) => send(*a, g.iter().zip(val(*a).data()).map(|(&g, &x)| g * (x + x)).collect()),
                Op::Softplus(a) => send(
                    *a,
                    g.iter().zip(val(*a).data()).map(|(&g, &x)| g * sigmoid(x)).collect(),
                ),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    send(*a, vec![g[0] / T::of(n as f64); n]);
                }
                Op::SumAxis(a, axis) => {
                    let x = val(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            d.push(if *axis == 0 { g[j] } else { g[i] });
                        }
                    }
                    send(*a, d);
                }
                Op::LogSumExp(a, axis) => {
                    let x = val(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = if *axis == 0 { j } else { i };
                            d.push(g[k] * (x.get(i, j) - y.data()[k]).exp());
                        }
                    }
                    send(*a, d);
                }
                Op::Concat(parts, axis) => {
                    let c = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let (pr, pc) = (pv.rows(), pv.cols());
                        let d = if *axis == 0 {
                            let s = g[offset * c..(offset + pr) * c].to_vec();
                            offset += pr;
                            s
                        } else {
                            let mut s = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                s.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                            }
                            offset += pc;
                            s
                        };
                        send(p, d);
                    }
                }
                Op::Slice(a, axis, start) => {
                    let x = val(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut d = vec![T::zero(); r * c];
                    let (yr, yc) = (y.rows(), y.cols());
                    for i in 0..yr {
                        for j in 0..yc {
                            let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                            d[si * c + sj] = g[i * yc + j];
                        }
                    }
                    send(*a, d);
                }
                Op::Transpose(a) => {
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g[i * c + j];
                        }
                    }
                    send(*a, d);
                }
            }
        }
        drop(nodes);

        let mut nodes = self.tape.nodes.borrow_mut();
        for (idx, g) in leaf_grads {
            let node = &mut nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, v)| *a += v),
                slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

/// Concatenates matrices along `axis`.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape = first.tape;
    for p in parts {
        first.same_tape(p)?;
    }
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.id].value).collect();
        let (r0, c0) = require_matrix("concat", vals[0].shape())?;
        for v in &vals {
            let (r, c) = require_matrix("concat", v.shape())?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) || axis > 1 {
                return Err(mismatch("concat", vals[0].shape(), v.shape()));
            }
        }
        let out = if axis == 0 {
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            Tensor::new([rows, c0], vals.iter().flat_map(|v| v.data().iter().copied()).collect())?
        } else {
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut d = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for v in &vals {
                    d.extend_from_slice(v.row(i));
                }
            }
            Tensor::new([r0, cols], d)?
        };
        (out, parts.iter().any(|p| nodes[p.id].requires_grad))
    };
    tape.push(
        "concat",
        value,
        Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        rg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 2], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_ones() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([3]));
        assert_eq!(x.sum().unwrap().item(), 3.0);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = t([2, 2], &[1.5, -2.0, 0.25, 7.0]);
        let out = tape.constant(Tensor::eye(2)).matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*out.value(), a);
    }

    #[test]
    fn logsumexp_values() {
        let tape = Tape::new();
        let z = tape.constant(t([1, 2], &[0.0, 0.0])).logsumexp(1).unwrap();
        assert!((z.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = tape.constant(t([1, 2], &[1000.0, 1000.0])).logsumexp(1).unwrap();
        assert_eq!(big.item(), 1000.0 + std::f64::consts::LN_2);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        x.mul(x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let y = x.square().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 8.0);
        tape.zero_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(t([1, 2], &[1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::NonScalarBackward(_))));
        let c = tape.constant(Tensor::scalar(1.0f64));
        assert!(matches!(c.backward(), Err(Error::NoGraph)));
    }

    #[test]
    fn op_errors() {
        let tape = Tape::new();
        let a = tape.constant(t([1, 2], &[1.0, 2.0]));
        let b = tape.constant(t([2, 1], &[1.0, 2.0]));
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(a.matmul(a), Err(Error::ShapeMismatch { .. })));
        let z = tape.constant(t([1, 2], &[0.0, 1.0]));
        assert!(matches!(z.log(), Err(Error::Domain { .. })));
        let huge = tape.constant(t([1, 1], &[1000.0]));
        assert!(matches!(huge.exp(), Err(Error::NonFinite { .. })));
        let other = Tape::new();
        let o = other.constant(t([1, 2], &[1.0, 2.0]));
        assert!(matches!(a.add(o), Err(Error::ForeignTape)));
    }

    #[test]
    fn straight_through_passes_gradient() {
        let tape = Tape::new();
        let x = tape.param(t([1, 3], &[0.2, 0.7, 0.5]));
        let h = x.straight_through_round().unwrap();
        assert_eq!(h.value().data(), &[0.0, 1.0, 1.0]);
        h.scale(2.0).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0; 3]);
    }
}
