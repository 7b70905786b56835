//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is an `Array2<f64>`; column vectors are `n x 1` and scalars
//! `1 x 1`. Binary arithmetic broadcasts `n x m` against `n x 1`, `1 x m` and
//! `1 x 1`. Nodes that do not depend on a parameter are never differentiated.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::manifold::batch::{exp0_rows, exp0_rows_vjp, log0_rows, log0_rows_vjp};
use crate::manifold::special::{atanhc, atanhc_dz, tanhc, tanhc_dz};
use crate::manifold::ManifoldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    Tanh,
    /// tanh approximation of GELU.
    Gelu,
    Exp,
    Ln,
    Sqrt,
    Softplus,
    Square,
    /// `tanh(sqrt(q)) / sqrt(q)` for a squared argument `q >= 0`.
    TanhcSq,
    /// `atanh(z) / z` with `z = min(sqrt(q), 1 - 1e-12)`.
    AtanhcSq,
}

const ATANH_LIMIT: f64 = 1.0 - 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::TanhcSq => tanhc(x.max(0.0).sqrt()),
            Unary::AtanhcSq => atanhc(x.max(0.0).sqrt().min(ATANH_LIMIT)),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            // d f(sqrt q)/dq = f'(z) / (2 z)
            Unary::TanhcSq => 0.5 * tanhc_dz(x.max(0.0).sqrt()),
            Unary::AtanhcSq => {
                let z = x.max(0.0).sqrt();
                if z >= ATANH_LIMIT {
                    0.0
                } else {
                    0.5 * atanhc_dz(z)
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(Unary, Var),
    Affine(Var, f64),
    RowSumSq(Var),
    RowDot(Var, Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    /// Row `b * parts.len() + t` of the output is row `b` of `parts[t]`.
    Interleave(Vec<Var>),
    NeighborMean(Var, Arc<Vec<Vec<usize>>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy(Var, Arc<Vec<usize>>, Array2<f64>),
    SmoothL1(Var, Arc<Vec<f64>>, f64),
    Mse(Var, Arc<Vec<f64>>),
    Exp0(ManifoldSpec, Var),
    Log0(ManifoldSpec, Var),
    ClampNorm(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sum_to_shape(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`, the natural product for weights stored `out x in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let value = match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Binary(op, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Div, a, b)
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let value = self.value(a).mapv(|x| f.eval(x));
        let ng = self.ng(a);
        self.push(value, Op::Unary(f, a), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let value = self.value(a).map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSumSq(a), ng)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let value = Zip::from(x.rows())
            .and(y.rows())
            .map_collect(|r, q| r.dot(&q))
            .insert_axis(Axis(1));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::RowDot(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    pub fn interleave(&mut self, parts: &[Var]) -> Var {
        let t = parts.len();
        let (b, d) = self.value(parts[0]).dim();
        let mut value = Array2::zeros((b * t, d));
        for (k, p) in parts.iter().enumerate() {
            let src = self.value(*p);
            value.slice_mut(s![k..;t, ..]).assign(src);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::Interleave(parts.to_vec()), ng)
    }

    /// Row `i` becomes the mean of the rows listed in `neighbors[i]`, or row
    /// `i` itself when the list is empty. Rows are summed in list order.
    pub fn neighbor_mean(&mut self, a: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros(x.dim());
        for (i, (mut out, list)) in value.rows_mut().into_iter().zip(neighbors.iter()).enumerate() {
            if list.is_empty() {
                out.assign(&x.row(i));
                continue;
            }
            for &j in list {
                out += &x.row(j);
            }
            out /= list.len() as f64;
        }
        let ng = self.ng(a);
        self.push(value, Op::NeighborMean(a, neighbors), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Causal multi-head attention over consecutive row groups of length
    /// `seq`; `q`, `k`, `v` are `(batch*seq) x d` with `d` divisible by
    /// `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        let dh = d / heads;
        let batch = rows / seq;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = qv.slice(s![b * seq + i, cols.clone()]);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = kv.slice(s![b * seq + j, cols.clone()]);
                        scores[j] = qi.dot(&kj) * inv;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(i + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let mut oi = out.slice_mut(s![b * seq + i, cols.clone()]);
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[base + i * seq + j] = p;
                        oi.scaled_add(p, &vv.slice(s![b * seq + j, cols.clone()]));
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row /= z;
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Mean cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets.iter()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let value = scalar(total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(value, Op::CrossEntropy(logits, targets, probs), ng)
    }

    /// Mean smooth-L1 loss of an `n x 1` prediction column.
    pub fn smooth_l1(&mut self, pred: Var, targets: Arc<Vec<f64>>, beta: f64) -> Var {
        let pv = self.value(pred);
        let total: f64 = pv
            .iter()
            .zip(targets.iter())
            .map(|(p, t)| crate::trainer::loss::smooth_l1(*p, *t, beta))
            .sum();
        let value = scalar(total / targets.len() as f64);
        let ng = self.ng(pred);
        self.push(value, Op::SmoothL1(pred, targets, beta), ng)
    }

    /// Mean squared error of an `n x 1` prediction column.
    pub fn mse(&mut self, pred: Var, targets: Arc<Vec<f64>>) -> Var {
        let pv = self.value(pred);
        let total: f64 = pv.iter().zip(targets.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
        let value = scalar(total / targets.len() as f64);
        let ng = self.ng(pred);
        self.push(value, Op::Mse(pred, targets), ng)
    }

    /// Row-wise exponential map at the origin (tangent chart in, ambient out).
    pub fn exp0(&mut self, spec: ManifoldSpec, a: Var) -> Var {
        let value = exp0_rows(&spec, self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Exp0(spec, a), ng)
    }

    /// Row-wise logarithmic map at the origin (ambient in, tangent chart out).
    pub fn log0(&mut self, spec: ManifoldSpec, a: Var) -> Var {
        let value = log0_rows(&spec, self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Log0(spec, a), ng)
    }

    /// Rescales rows whose norm exceeds the `1 x 1` radius onto the radius,
    /// keeping direction.
    pub fn clamp_norm(&mut self, a: Var, radius: Var) -> Var {
        let r = self.scalar_value(radius);
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > r {
                row *= r / n;
            }
        }
        let ng = self.ng(a) || self.ng(radius);
        self.push(value, Op::ClampNorm(a, radius), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones(self.value(out).dim()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = match op {
                        BinOp::Add | BinOp::Sub => g.clone(),
                        BinOp::Mul => g * y,
                        BinOp::Div => g / y,
                    };
                    self.acc(grads, *a, sum_to_shape(ga, x.dim()));
                }
                if self.ng(*b) {
                    let gb = match op {
                        BinOp::Add => g.clone(),
                        BinOp::Sub => -g,
                        BinOp::Mul => g * x,
                        BinOp::Div => -(g * &node.value) / y,
                    };
                    self.acc(grads, *b, sum_to_shape(gb, y.dim()));
                }
            }
            Op::Unary(f, a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .and(&node.value)
                    .for_each(|gv, &x, &y| *gv *= f.deriv(x, y));
                self.acc(grads, *a, ga);
            }
            Op::Affine(a, scale) => self.acc(grads, *a, g * *scale),
            Op::RowSumSq(a) => {
                let ga = self.value(*a) * g * 2.0;
                self.acc(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, self.value(*b) * g);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a) * g);
                }
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                ga.slice_mut(s![.., *start..*end]).assign(g);
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.value(*a).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                self.acc(grads, *a, ga);
            }
            Op::Interleave(parts) => {
                let t = parts.len();
                for (k, p) in parts.iter().enumerate() {
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![k..;t, ..]).to_owned());
                    }
                }
            }
            Op::NeighborMean(a, neighbors) => {
                let mut ga = Array2::zeros(g.dim());
                for (i, list) in neighbors.iter().enumerate() {
                    if list.is_empty() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(i);
                        continue;
                    }
                    let w = 1.0 / list.len() as f64;
                    for &j in list {
                        ga.row_mut(j).scaled_add(w, &g.row(i));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, gg);
                }
                if self.ng(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = g.ncols() as f64;
                    let mut gx = Array2::zeros(g.dim());
                    for (((mut out, dh), xh), &is) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std)
                    {
                        let m1 = dh.sum() / d;
                        let m2 = dh.dot(&xh) / d;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = is * (a - m1 - b * m2));
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.dim();
                let (seq, heads) = (*seq, *heads);
                let dh = d / heads;
                let batch = rows / seq;
                let inv = 1.0 / (dh as f64).sqrt();
                let mut gq = Array2::zeros((rows, d));
                let mut gk = Array2::zeros((rows, d));
                let mut gv = Array2::zeros((rows, d));
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gi = g.slice(s![b * seq + i, cols.clone()]);
                            let mut dot_pd = 0.0;
                            for j in 0..=i {
                                let p = probs[base + i * seq + j];
                                let vj = vv.slice(s![b * seq + j, cols.clone()]);
                                dp[j] = gi.dot(&vj);
                                dot_pd += p * dp[j];
                                gv.slice_mut(s![b * seq + j, cols.clone()]).scaled_add(p, &gi);
                            }
                            for j in 0..=i {
                                let p = probs[base + i * seq + j];
                                let ds = p * (dp[j] - dot_pd) * inv;
                                let kj = kv.slice(s![b * seq + j, cols.clone()]);
                                gq.slice_mut(s![b * seq + i, cols.clone()]).scaled_add(ds, &kj);
                                let qi = qv.slice(s![b * seq + i, cols.clone()]);
                                gk.slice_mut(s![b * seq + j, cols.clone()]).scaled_add(ds, &qi);
                            }
                        }
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|v, &p| *v -= p * s);
                }
                self.acc(grads, *a, ga);
            }
            Op::CrossEntropy(a, targets, probs) => {
                let n = targets.len() as f64;
                let mut ga = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    ga[[r, t]] -= 1.0;
                }
                ga *= g[[0, 0]] / n;
                self.acc(grads, *a, ga);
            }
            Op::SmoothL1(a, targets, beta) => {
                let n = targets.len() as f64;
                let scale = g[[0, 0]] / n;
                let mut ga = self.value(*a).clone();
                for (p, t) in ga.iter_mut().zip(targets.iter()) {
                    let diff = *p - t;
                    *p = scale * if diff.abs() < *beta { diff / beta } else { diff.signum() };
                }
                self.acc(grads, *a, ga);
            }
            Op::Mse(a, targets) => {
                let n = targets.len() as f64;
                let scale = 2.0 * g[[0, 0]] / n;
                let mut ga = self.value(*a).clone();
                for (p, t) in ga.iter_mut().zip(targets.iter()) {
                    *p = scale * (*p - t);
                }
                self.acc(grads, *a, ga);
            }
            Op::Exp0(spec, a) => {
                let ga = exp0_rows_vjp(spec, self.value(*a), g);
                self.acc(grads, *a, ga);
            }
            Op::Log0(spec, a) => {
                let ga = log0_rows_vjp(spec, self.value(*a), g);
                self.acc(grads, *a, ga);
            }
            Op::ClampNorm(a, radius) => {
                let r = self.scalar_value(*radius);
                let x = self.value(*a);
                let mut ga = g.clone();
                let mut gr = 0.0;
                for (mut grow, xr) in ga.rows_mut().into_iter().zip(x.rows()) {
                    let n = xr.dot(&xr).sqrt();
                    if n > r {
                        let proj = grow.dot(&xr) / n;
                        gr += proj;
                        Zip::from(&mut grow)
                            .and(&xr)
                            .for_each(|gv, &xv| *gv = r / n * (*gv - proj * xv / n));
                    }
                }
                if self.ng(*a) {
                    self.acc(grads, *a, ga);
                }
                if self.ng(*radius) {
                    self.acc(grads, *radius, scalar(gr));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w * f(x)))/dx for every entry of every input.
    fn check(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = rand_mat(&mut rng, tape.value(out).nrows(), tape.value(out).ncols());
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        let eval = |ins: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|a| t.param(a.clone())).collect();
            let o = f(&mut t, &vs);
            (t.value(o) * &w).sum()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient present");
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k}[{idx}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_broadcasting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 3, 2);
        let w = rand_mat(&mut rng, 5, 3);
        let col = rand_mat(&mut rng, 4, 1).mapv(|v| v + 2.0);
        let row = rand_mat(&mut rng, 1, 2);
        let s = rand_mat(&mut rng, 1, 1);
        check(vec![a, b, w, col, row, s], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let aw = t.matmul_t(v[0], v[2]);
            let aw = t.slice_cols(aw, 0, 2);
            let m = t.mul(ab, aw);
            let m = t.div(m, v[3]);
            let m = t.add(m, v[4]);
            let m = t.sub(m, v[5]);
            t.mul(m, v[5])
        });
    }

    #[test]
    fn unary_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in [
            Unary::Tanh,
            Unary::Gelu,
            Unary::Exp,
            Unary::Softplus,
            Unary::Square,
            Unary::Relu,
        ] {
            let a = rand_mat(&mut rng, 3, 3);
            check(vec![a], |t, v| t.unary(f, v[0]));
        }
        let pos = rand_mat(&mut rng, 3, 3).mapv(|v| v.abs() + 0.1);
        check(vec![pos.clone()], |t, v| t.unary(Unary::Ln, v[0]));
        check(vec![pos.clone()], |t, v| t.unary(Unary::Sqrt, v[0]));
        check(vec![pos.clone()], |t, v| t.unary(Unary::TanhcSq, v[0]));
        let small = pos.mapv(|v| v * 0.5);
        check(vec![small], |t, v| t.unary(Unary::AtanhcSq, v[0]));
    }

    #[test]
    fn reductions_and_reshaping() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 4, 3);
        let c = rand_mat(&mut rng, 4, 2);
        check(vec![a, b, c], |t, v| {
            let n = t.row_sum_sq(v[0]);
            let d = t.row_dot(v[0], v[1]);
            let cat = t.concat_cols(&[v[0], v[2], n, d]);
            let g = t.gather_rows(cat, Arc::new(vec![3, 0, 0, 2, 1]));
            let i = t.interleave(&[v[1], v[0]]);
            let i = t.sum(i);
            let m = t.mean(g);
            let s = t.add(i, m);
            let g = t.mul(g, s);
            t.affine(g, 2.0, 1.0)
        });
    }

    #[test]
    fn graph_and_normalization_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 4, 5);
        let gamma = rand_mat(&mut rng, 1, 5);
        let beta = rand_mat(&mut rng, 1, 5);
        let neighbors = Arc::new(vec![vec![1, 2], vec![0], vec![], vec![0, 1, 2]]);
        check(vec![x, gamma, beta], move |t, v| {
            let m = t.neighbor_mean(v[0], neighbors.clone());
            let l = t.layer_norm(m, v[1], v[2], 1e-5);
            t.softmax_rows(l)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 6, 4);
        let k = rand_mat(&mut rng, 6, 4);
        let v = rand_mat(&mut rng, 6, 4);
        check(vec![q, k, v], |t, x| t.attention(x[0], x[1], x[2], 3, 2));
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_mat(&mut rng, 3, 2);
        let k = rand_mat(&mut rng, 3, 2);
        let mut v = rand_mat(&mut rng, 3, 2);
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let before = t.attention(qv, kv, vv, 3, 1);
        let before = t.value(before).clone();
        v.row_mut(2).fill(100.0);
        let vv = t.constant(v);
        let after = t.attention(qv, kv, vv, 3, 1);
        assert_eq!(before.row(0), t.value(after).row(0));
        assert_eq!(before.row(1), t.value(after).row(1));
        // the first token attends only to itself
        assert!((t.value(after)[[0, 0]] - t.value(vv)[[0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = rand_mat(&mut rng, 4, 3);
        let targets = Arc::new(vec![0, 2, 1, 2]);
        check(vec![logits], move |t, v| t.cross_entropy(v[0], targets.clone()));
        let pred = Array2::from_shape_vec((4, 1), vec![0.3, -2.0, 1.5, 0.05]).unwrap();
        let tg = Arc::new(vec![0.0, 0.0, 0.0, 0.0]);
        let tg2 = tg.clone();
        check(vec![pred.clone()], move |t, v| t.smooth_l1(v[0], tg.clone(), 1.0));
        check(vec![pred], move |t, v| t.mse(v[0], tg2.clone()));
    }

    #[test]
    fn manifold_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for spec in [
            ManifoldSpec::euclidean(),
            ManifoldSpec::hyperbolic(-0.7).unwrap(),
            ManifoldSpec::spherical(1.3).unwrap(),
        ] {
            let u = rand_mat(&mut rng, 3, 4).mapv(|v| v * 0.5);
            check(vec![u], move |t, v| {
                let x = t.exp0(spec, v[0]);
                let y = t.unary(Unary::Tanh, x);
                let y = t.log0(spec, y);
                t.concat_cols(&[y, x])
            });
        }
        let x = rand_mat(&mut rng, 4, 3);
        let r = Array2::from_elem((1, 1), 0.9);
        check(vec![x, r], |t, v| t.clamp_norm(v[0], v[1]));
    }
}
