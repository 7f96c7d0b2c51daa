//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward primitive validates shapes, computes its value eagerly and
//! appends a node to the tape. [`Tape::backward`] consumes the tape and walks it
//! in reverse, accumulating adjoints only along nodes that depend on an input or
//! parameter leaf.
//!
//! The primitive set is deliberately closed: affine maps, tanh and GELU,
//! softmax, masked scaled-dot attention, add/sub/mul (equal shapes, a
//! one-element factor or a per-row factor; nothing else broadcasts), scale by a
//! constant, sum, mean-squared error, diagonal Gaussian log-density, and the
//! exp/clip/min trio used by the clipped policy surrogate.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MulKind {
    Elementwise,
    Scalar,
    Rows,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    Affine { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    Attention { q: Var, keys: Vec<Var>, values: Vec<Var>, mask: Vec<bool>, probs: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var, MulKind),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    GaussianLogDensity { sample: Var, mean: Var, scale: f64 },
    Exp(Var),
    Clip { a: Var, lo: f64, hi: f64 },
    Min(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records forward primitives for one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Closed-form log-density of a diagonal Gaussian with shared scale.
pub fn gaussian_log_density(sample: &[f64], mean: &[f64], scale: f64) -> f64 {
    let mut quad = 0.0;
    for (s, m) in sample.iter().zip(mean) {
        let z = (s - m) / scale;
        quad += z * z;
    }
    let d = sample.len() as f64;
    -0.5 * quad - d * scale.ln() - 0.5 * d * (2.0 * PI).ln()
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, deps: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = deps.iter().any(|d| self.nodes[d.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        check_finite("input", &value)?;
        Ok(self.push(value, Op::Input, true))
    }

    /// A named parameter leaf; gradients are collected by name.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        Error::Shape { op, shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect() }
    }

    /// `y = x Wᵀ + b`, applied to every row of `x` (last axis = input features).
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.cols() != ws.shape()[1] {
            return Err(self.shape_err("affine", &[x, w]));
        }
        let (out, inp) = (ws.shape()[0], ws.shape()[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return Err(self.shape_err("affine", &[x, w, b]));
            }
        }
        let rows = xs.rows();
        let (xd, wd) = (xs.data(), ws.data());
        let bd = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for i in 0..inp {
                    acc += xr[i] * wr[i];
                }
                if let Some(bd) = bd {
                    acc += bd[o];
                }
                y[r * out + o] = acc;
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push_checked("affine", Tensor::from_parts(shape, y), Op::Affine { x, w, b }, &deps)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push_checked("tanh", v, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push_checked("gelu", v, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push_checked("softmax", v, Op::Softmax(a), &[a])
    }

    /// Single-head scaled-dot attention.
    ///
    /// `q` is `[tq, d]`; the key and value blocks are stacked row-wise in the
    /// order given (each block `[r_i, d]` / `[r_i, dv]`). `mask[i * tk + j]`
    /// allows query `i` to see key `j`; masked pairs get exactly zero weight.
    pub fn attention(&mut self, q: Var, keys: &[Var], values: &[Var], mask: Vec<bool>) -> Result<Var> {
        let qs = self.value(q);
        if qs.shape().len() != 2 || keys.len() != values.len() || keys.is_empty() {
            return Err(self.shape_err("attention", &[q]));
        }
        let (tq, d) = (qs.shape()[0], qs.shape()[1]);
        let mut krows: Vec<&[f64]> = Vec::new();
        let mut vrows: Vec<&[f64]> = Vec::new();
        let dv = self.value(values[0]).cols();
        for (&k, &v) in keys.iter().zip(values) {
            let (kt, vt) = (self.value(k), self.value(v));
            if kt.cols() != d || vt.cols() != dv || kt.rows() != vt.rows() {
                let mut all = vec![q];
                all.extend_from_slice(keys);
                all.extend_from_slice(values);
                return Err(self.shape_err("attention", &all));
            }
            krows.extend((0..kt.rows()).map(|r| kt.row(r)));
            vrows.extend((0..vt.rows()).map(|r| vt.row(r)));
        }
        let tk = krows.len();
        if mask.len() != tq * tk {
            return Err(Error::Shape { op: "attention", shapes: vec![vec![tq, tk], vec![mask.len()]] });
        }
        let inv = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; tq * tk];
        let mut out = vec![0.0; tq * dv];
        for i in 0..tq {
            let qi = qs.row(i);
            let row = &mut probs[i * tk..(i + 1) * tk];
            let mut m = f64::NEG_INFINITY;
            for j in 0..tk {
                if mask[i * tk + j] {
                    let s: f64 = qi.iter().zip(krows[j]).map(|(a, b)| a * b).sum::<f64>() * inv;
                    row[j] = s;
                    m = m.max(s);
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("attention: query {i} has no visible keys")));
            }
            let mut z = 0.0;
            for j in 0..tk {
                if mask[i * tk + j] {
                    row[j] = (row[j] - m).exp();
                    z += row[j];
                }
            }
            for j in 0..tk {
                if mask[i * tk + j] {
                    row[j] /= z;
                    let p = row[j];
                    for (o, vv) in out[i * dv..(i + 1) * dv].iter_mut().zip(vrows[j]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let mut deps = vec![q];
        deps.extend_from_slice(keys);
        deps.extend_from_slice(values);
        let op = Op::Attention { q, keys: keys.to_vec(), values: values.to_vec(), mask, probs };
        self.push_checked("attention", Tensor::from_parts(vec![tq, dv], out), op, &deps)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", &[a, b]));
        }
        let (x, y) = (self.value(a), self.value(b));
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), d);
        self.push_checked("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", &[a, b]));
        }
        let (x, y) = (self.value(a), self.value(b));
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), d);
        self.push_checked("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Product of `a` with `b`, where `b` has the same shape as `a`, exactly one
    /// element, or shape `[rows(a), 1]` (one factor per row of `a`).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let kind = if x.shape() == y.shape() {
            MulKind::Elementwise
        } else if y.len() == 1 {
            MulKind::Scalar
        } else if y.shape() == [x.rows(), 1] {
            MulKind::Rows
        } else {
            return Err(self.shape_err("mul", &[a, b]));
        };
        let c = x.cols();
        let d: Vec<f64> = match kind {
            MulKind::Elementwise => x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
            MulKind::Scalar => {
                let s = y.data()[0];
                x.data().iter().map(|p| p * s).collect()
            }
            MulKind::Rows => x.data().iter().enumerate().map(|(i, p)| p * y.data()[i / c]).collect(),
        };
        let v = Tensor::from_parts(x.shape().to_vec(), d);
        self.push_checked("mul", v, Op::Mul(a, b, kind), &[a, b])
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push_checked("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum", v, Op::Sum(a), &[a])
    }

    /// Mean over all elements of `(a - b)²`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mse", &[a, b]));
        }
        let (x, y) = (self.value(a), self.value(b));
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let v = Tensor::scalar(s / x.len() as f64);
        self.push_checked("mse", v, Op::Mse(a, b), &[a, b])
    }

    /// Log-density of `sample` under a diagonal Gaussian with the given mean and
    /// shared scale, summed over all elements.
    pub fn gaussian_log_density(&mut self, sample: Var, mean: Var, scale: f64) -> Result<Var> {
        if self.shape(sample) != self.shape(mean) {
            return Err(self.shape_err("gaussian_log_density", &[sample, mean]));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("gaussian_log_density: scale must be > 0, got {scale}")));
        }
        let lp = gaussian_log_density(self.value(sample).data(), self.value(mean).data(), scale);
        let op = Op::GaussianLogDensity { sample, mean, scale };
        self.push_checked("gaussian_log_density", Tensor::scalar(lp), op, &[sample, mean])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push_checked("exp", v, Op::Exp(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_checked("clip", v, Op::Clip { a, lo, hi }, &[a])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("min", &[a, b]));
        }
        let (x, y) = (self.value(a), self.value(b));
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p.min(*q)).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), d);
        self.push_checked("min", v, Op::Min(a, b), &[a, b])
    }

    /// Reverse pass from a one-element root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            // Accumulates `delta` into the adjoint of `v`.
            let acc = |v: Var, delta: Vec<f64>, adj: &mut Vec<Option<Vec<f64>>>| match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Constant | Op::Input | Op::Param => {
                    adj[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (xs, ws) = (val(*x), val(*w));
                    let (out, inp) = (ws.shape()[0], ws.shape()[1]);
                    let rows = xs.rows();
                    if wants(*x) {
                        let mut dx = vec![0.0; rows * inp];
                        for r in 0..rows {
                            let dxr = &mut dx[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    let wr = &ws.data()[o * inp..(o + 1) * inp];
                                    for i in 0..inp {
                                        dxr[i] += go * wr[i];
                                    }
                                }
                            }
                        }
                        acc(*x, dx, &mut adj);
                    }
                    if wants(*w) {
                        let mut dw = vec![0.0; out * inp];
                        for r in 0..rows {
                            let xr = &xs.data()[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    let dwr = &mut dw[o * inp..(o + 1) * inp];
                                    for i in 0..inp {
                                        dwr[i] += go * xr[i];
                                    }
                                }
                            }
                        }
                        acc(*w, dw, &mut adj);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut db = vec![0.0; out];
                            for r in 0..rows {
                                for o in 0..out {
                                    db[o] += g[r * out + o];
                                }
                            }
                            acc(*b, db, &mut adj);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(*a, d, &mut adj);
                }
                Op::Gelu(a) => {
                    let x = val(*a).data();
                    let d = g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect();
                    acc(*a, d, &mut adj);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, d, &mut adj);
                }
                Op::Attention { q, keys, values, mask, probs } => {
                    let qs = val(*q);
                    let (tq, d) = (qs.shape()[0], qs.shape()[1]);
                    let inv = 1.0 / (d as f64).sqrt();
                    let mut krows: Vec<&[f64]> = Vec::new();
                    let mut vrows: Vec<&[f64]> = Vec::new();
                    for (&k, &v) in keys.iter().zip(values) {
                        let (kt, vt) = (val(k), val(v));
                        krows.extend((0..kt.rows()).map(|r| kt.row(r)));
                        vrows.extend((0..vt.rows()).map(|r| vt.row(r)));
                    }
                    let tk = krows.len();
                    let dv = vrows[0].len();
                    let mut dq = vec![0.0; tq * d];
                    let mut dk = vec![0.0; tk * d];
                    let mut dvv = vec![0.0; tk * dv];
                    for i in 0..tq {
                        let gi = &g[i * dv..(i + 1) * dv];
                        let pi = &probs[i * tk..(i + 1) * tk];
                        let mut dp = vec![0.0; tk];
                        let mut dot = 0.0;
                        for j in 0..tk {
                            if mask[i * tk + j] {
                                dp[j] = gi.iter().zip(vrows[j]).map(|(a, b)| a * b).sum();
                                dot += pi[j] * dp[j];
                                for (o, gg) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                                    *o += pi[j] * gg;
                                }
                            }
                        }
                        let qi = qs.row(i);
                        for j in 0..tk {
                            if !mask[i * tk + j] {
                                continue;
                            }
                            let ds = pi[j] * (dp[j] - dot) * inv;
                            for c in 0..d {
                                dq[i * d + c] += ds * krows[j][c];
                                dk[j * d + c] += ds * qi[c];
                            }
                        }
                    }
                    if wants(*q) {
                        acc(*q, dq, &mut adj);
                    }
                    let mut off = 0;
                    for (&k, &v) in keys.iter().zip(values) {
                        let r = val(k).rows();
                        if wants(k) {
                            acc(k, dk[off * d..(off + r) * d].to_vec(), &mut adj);
                        }
                        if wants(v) {
                            acc(v, dvv[off * dv..(off + r) * dv].to_vec(), &mut adj);
                        }
                        off += r;
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        acc(*b, g.clone(), &mut adj);
                    }
                    if wants(*a) {
                        acc(*a, g, &mut adj);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        acc(*b, g.iter().map(|x| -x).collect(), &mut adj);
                    }
                    if wants(*a) {
                        acc(*a, g, &mut adj);
                    }
                }
                Op::Mul(a, b, kind) => {
                    let (x, y) = (val(*a), val(*b));
                    let c = x.cols();
                    if wants(*a) {
                        let d = match kind {
                            MulKind::Elementwise => g.iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                            MulKind::Scalar => g.iter().map(|g| g * y.data()[0]).collect(),
                            MulKind::Rows => g.iter().enumerate().map(|(i, g)| g * y.data()[i / c]).collect(),
                        };
                        acc(*a, d, &mut adj);
                    }
                    if wants(*b) {
                        let d = match kind {
                            MulKind::Elementwise => g.iter().zip(x.data()).map(|(g, x)| g * x).collect(),
                            MulKind::Scalar => vec![g.iter().zip(x.data()).map(|(g, x)| g * x).sum()],
                            MulKind::Rows => {
                                let mut d = vec![0.0; y.len()];
                                for (i, (g, x)) in g.iter().zip(x.data()).enumerate() {
                                    d[i / c] += g * x;
                                }
                                d
                            }
                        };
                        acc(*b, d, &mut adj);
                    }
                }
                Op::Scale(a, c) => {
                    acc(*a, g.iter().map(|g| g * c).collect(), &mut adj);
                }
                Op::Sum(a) => {
                    acc(*a, vec![g[0]; val(*a).len()], &mut adj);
                }
                Op::Mse(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let k = 2.0 * g[0] / x.len() as f64;
                    let d: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| k * (p - q)).collect();
                    if wants(*b) {
                        acc(*b, d.iter().map(|v| -v).collect(), &mut adj);
                    }
                    if wants(*a) {
                        acc(*a, d, &mut adj);
                    }
                }
                Op::GaussianLogDensity { sample, mean, scale } => {
                    let (s, m) = (val(*sample), val(*mean));
                    let k = g[0] / (scale * scale);
                    let d: Vec<f64> = s.data().iter().zip(m.data()).map(|(s, m)| k * (s - m)).collect();
                    if wants(*sample) {
                        acc(*sample, d.iter().map(|v| -v).collect(), &mut adj);
                    }
                    if wants(*mean) {
                        acc(*mean, d, &mut adj);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect(), &mut adj);
                }
                Op::Clip { a, lo, hi } => {
                    let x = val(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x < *lo || *x > *hi { 0.0 } else { *g })
                        .collect();
                    acc(*a, d, &mut adj);
                }
                Op::Min(a, b) => {
                    let (x, y) = (val(*a).data(), val(*b).data());
                    let da = g.iter().zip(x.iter().zip(y)).map(|(g, (p, q))| if p <= q { *g } else { 0.0 });
                    let db = g.iter().zip(x.iter().zip(y)).map(|(g, (p, q))| if p <= q { 0.0 } else { *g });
                    let (da, db): (Vec<f64>, Vec<f64>) = (da.collect(), db.collect());
                    if wants(*a) {
                        acc(*a, da, &mut adj);
                    }
                    if wants(*b) {
                        acc(*b, db, &mut adj);
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes, params: self.params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf, or `None` if the root does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.adjoints[v.0]
            .as_ref()
            .map(|a| Tensor::from_parts(self.shapes[v.0].clone(), a.clone()))
    }

    /// Gradients keyed exactly like `store`: every parameter appears, with zeros
    /// for those the root does not depend on. Ready for [`ParamStore::adamw_step`].
    pub fn keyed_like(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = self.by_name();
        out.retain(|k, _| store.get(k).is_some());
        for (name, value) in store.iter() {
            out.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape()));
        }
        out
    }

    /// Parameter gradients keyed by name, for parameters bound on the tape.
    /// Parameters bound more than once have their contributions summed.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = &self.shapes[v.0];
            let entry = out.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            if let Some(a) = &self.adjoints[v.0] {
                entry.data_mut().iter_mut().zip(a).for_each(|(e, g)| *e += g);
            }
        }
        out
    }
}
