//! Reverse-mode differentiation over a linear recording of ops.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! replays the nodes in exact reverse order and accumulates input gradients,
//! so shared subexpressions receive the sum of all path contributions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::tensor::Tensor;

/// Environment variable that turns on per-op finiteness checks.
pub const CHECK_FINITE_ENV: &str = "SUBJECTFLOW_CHECK_FINITE";

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    Normalize { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Concat(Vec<Var>),
    SliceOuter { x: Var, offset: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Op recorder. Single-threaded; build one per sample and sum gradients
/// across tapes explicitly.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax along `axis` of a plain tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!("softmax axis {axis} for rank {}", shape.len())));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::invalid("softmax over empty axis"));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for j in 0..n {
                lane[j] = data[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for j in 0..n {
                data[base + j * inner] = lane[j];
            }
        }
    }
    Ok(out)
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl Tape {
    pub fn new() -> Self {
        let check_finite = std::env::var(CHECK_FINITE_ENV)
            .map(|v| v != "0" && !v.is_empty())
            .unwrap_or(false);
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b)
            | Op::MatMul(a, b) | Op::Mse(a, b) => self.rg(*a) || self.rg(*b),
            Op::Attention { q, k, v, .. } => self.rg(*q) || self.rg(*k) || self.rg(*v),
            Op::Concat(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Log(x)
            | Op::Softmax { x, .. }
            | Op::Normalize { x, .. }
            | Op::SliceOuter { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => self.rg(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf whose gradient is kept after backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape(), g.clone()).ok()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    fn row_operand(&self, a: Var, b: Var, op: &'static str) -> Result<usize> {
        let d = self.value(a).last_dim();
        if self.value(b).numel() != d {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(d)
    }

    /// Adds the vector `b` (numel == last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.row_operand(a, b, "add_row")?;
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        self.push(out, Op::AddRow(a, b), "add_row")
    }

    /// Multiplies every row of `a` elementwise by the vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.row_operand(a, b, "mul_row")?;
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        }
        self.push(out, Op::MulRow(a, b), "mul_row")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `x @ w + b` for `x: [M,K]`, `w: [K,N]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        self.push(out, Op::Softmax { x: a, axis }, "softmax")
    }

    /// Per-row standardization over the last axis (no affine).
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer norm eps must be positive"));
        }
        let d = self.value(a).last_dim();
        if d == 0 {
            return Err(Error::invalid("layer norm over empty axis"));
        }
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::Normalize { x: a, inv_std }, "layer_norm")
    }

    /// Affine layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [Lq, H*dk]`, `k: [Lk, H*dk]`, `v: [Lk, H*dv]`; heads occupy
    /// contiguous column blocks. Output is `[Lq, H*dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, qd) = matrix_dims(self.value(q), "attention")?;
        let (lk, kd) = matrix_dims(self.value(k), "attention")?;
        let (lv, vd) = matrix_dims(self.value(v), "attention")?;
        if lk == 0 {
            return Err(Error::invalid("attention over an empty key set"));
        }
        if heads == 0 || qd != kd || lk != lv || qd % heads != 0 || vd % heads != 0 || qd == 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let dk = qd / heads;
        let dv = vd / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; lq * vd];
        let mut probs = vec![0.0; heads * lq * lk];
        let mut qh = vec![0.0; lq * dk];
        let mut kh = vec![0.0; lk * dk];
        let mut vh = vec![0.0; lk * dv];
        let mut oh = vec![0.0; lq * dv];
        for h in 0..heads {
            gather_cols(qv, qd, h * dk, dk, &mut qh);
            gather_cols(kv, kd, h * dk, dk, &mut kh);
            gather_cols(vv, vd, h * dv, dv, &mut vh);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm_nt(&qh, &kh, p, lq, dk, lk);
            for row in p.chunks_mut(lk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            oh.iter_mut().for_each(|x| *x = 0.0);
            gemm_nn(p, &vh, &mut oh, lq, lk, dv);
            scatter_cols(&oh, &mut out, vd, h * dv, dv, false);
        }
        let out = Tensor::new(&[lq, vd], out)?;
        self.push(out, Op::Attention { q, k, v, heads, probs }, "attention")
    }

    /// Single-head `softmax(Q K^T / sqrt(d)) V`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attention(q, k, v, 1)
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_outer(&tensors)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_outer(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_outer(start, end)?;
        let inner: usize = self.shape(a)[1..].iter().product();
        self.push(out, Op::SliceOuter { x: a, offset: start * inner }, "slice")
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        if start > end || end > d {
            return Err(Error::invalid(format!("column slice {start}..{end} of width {d}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(src.rows() * w);
        for row in src.data().chunks(d) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::SliceCols { x: a, start }, "slice_cols")
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Gather { x: a, index }, "gather")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), "mean")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mse of empty tensors"));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mse(a, b), "mse")
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily move the op out so we can borrow values and grads freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(a) {
                    add_into(ga, g);
                }
                let d = self.nodes[b.0].value.numel();
                if let Some(gb) = self.acc(b) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let d = self.nodes[b.0].value.numel();
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for (grow, gyrow) in ga.chunks_mut(d).zip(g.chunks(d)) {
                        for ((x, gy), bb) in grow.iter_mut().zip(gyrow).zip(&bv) {
                            *x += gy * bb;
                        }
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (arow, gyrow) in av.chunks(d).zip(g.chunks(d)) {
                        for ((x, gy), aa) in gb.iter_mut().zip(gyrow).zip(arow) {
                            *x += gy * aa;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(&self.nodes[a.0].value, "matmul")?;
                let n = self.nodes[b.0].value.shape()[1];
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.acc(a).unwrap();
                    gemm_nt(g, &bv, ga, m, n, k);
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.acc(b).unwrap();
                    gemm_tn(&av, g, gb, m, k, n);
                }
            }
            Op::Gelu(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let ga = self.acc(a).unwrap();
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(&av) {
                    *x += gy * (normal_cdf(*v) + v * normal_pdf(*v));
                }
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let ga = self.acc(a).unwrap();
                for ((x, gy), v) in ga.iter_mut().zip(g).zip(&av) {
                    *x += gy / v;
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.clone();
                let shape = y.shape().to_vec();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let yv = y.data();
                let gx = self.acc(x).unwrap();
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * n * inner + c;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * yv[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] += yv[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::Normalize { x, ref inv_std } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                let gx = self.acc(x).unwrap();
                for (r, ((gxr, gr), yr)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let is = inv_std[r];
                    for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o += is * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::Attention { q, k, v, heads, ref probs } => {
                self.attention_backward(q, k, v, heads, probs, g)?;
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(gp) = self.acc(p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceOuter { x, offset } => {
                let gx = self.acc(x).unwrap();
                add_into(&mut gx[offset..offset + g.len()], g);
            }
            Op::SliceCols { x, start } => {
                let w = self.nodes[i].value.last_dim();
                let d = self.nodes[x.0].value.last_dim();
                let gx = self.acc(x).unwrap();
                for (gxr, gr) in gx.chunks_mut(d).zip(g.chunks(w)) {
                    add_into(&mut gxr[start..start + w], gr);
                }
            }
            Op::Gather { x, ref index } => {
                let gx = self.acc(x).unwrap();
                for (gy, &src) in g.iter().zip(index) {
                    gx[src] += gy;
                }
            }
            Op::Reshape(x) => {
                let gx = self.acc(x).unwrap();
                add_into(gx, g);
            }
            Op::Sum(x) => {
                let gx = self.acc(x).unwrap();
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let gx = self.acc(x).unwrap();
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let c = 2.0 * g[0] / av.len() as f64;
                if let Some(ga) = self.acc(a) {
                    for ((x, p), q) in ga.iter_mut().zip(&av).zip(&bv) {
                        *x += c * (p - q);
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((x, p), q) in gb.iter_mut().zip(&av).zip(&bv) {
                        *x -= c * (p - q);
                    }
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[f64], g: &[f64]) -> Result<()> {
        let (lq, qd) = matrix_dims(&self.nodes[q.0].value, "attention")?;
        let lk = self.nodes[k.0].value.shape()[0];
        let vd = self.nodes[v.0].value.shape()[1];
        let dk = qd / heads;
        let dv = vd / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.nodes[q.0].value.data().to_vec();
        let kv = self.nodes[k.0].value.data().to_vec();
        let vv = self.nodes[v.0].value.data().to_vec();
        let (rq, rk, rv) = (self.rg(q), self.rg(k), self.rg(v));
        let mut gq = vec![0.0; if rq { lq * qd } else { 0 }];
        let mut gk = vec![0.0; if rk { lk * qd } else { 0 }];
        let mut gv = vec![0.0; if rv { lk * vd } else { 0 }];

        let mut qh = vec![0.0; lq * dk];
        let mut kh = vec![0.0; lk * dk];
        let mut vh = vec![0.0; lk * dv];
        let mut goh = vec![0.0; lq * dv];
        let mut dp = vec![0.0; lq * lk];
        let mut tmp_k = vec![0.0; lk * dk];
        let mut tmp_q = vec![0.0; lq * dk];
        let mut tmp_v = vec![0.0; lk * dv];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            gather_cols(g, vd, h * dv, dv, &mut goh);
            if rv {
                tmp_v.iter_mut().for_each(|x| *x = 0.0);
                gemm_tn(p, &goh, &mut tmp_v, lq, lk, dv);
                scatter_cols(&tmp_v, &mut gv, vd, h * dv, dv, true);
            }
            if !(rq || rk) {
                continue;
            }
            gather_cols(&vv, vd, h * dv, dv, &mut vh);
            dp.iter_mut().for_each(|x| *x = 0.0);
            gemm_nt(&goh, &vh, &mut dp, lq, dv, lk);
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the logit scale.
            for (dprow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot: f64 = dprow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, pp) in dprow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            if rq {
                gather_cols(&kv, qd, h * dk, dk, &mut kh);
                tmp_q.iter_mut().for_each(|x| *x = 0.0);
                gemm_nn(&dp, &kh, &mut tmp_q, lq, lk, dk);
                scatter_cols(&tmp_q, &mut gq, qd, h * dk, dk, true);
            }
            if rk {
                gather_cols(&qv, qd, h * dk, dk, &mut qh);
                tmp_k.iter_mut().for_each(|x| *x = 0.0);
                gemm_tn(&dp, &qh, &mut tmp_k, lq, lk, dk);
                scatter_cols(&tmp_k, &mut gk, qd, h * dk, dk, true);
            }
        }
        if rq {
            add_into(self.acc(q).unwrap(), &gq);
        }
        if rk {
            add_into(self.acc(k).unwrap(), &gk);
        }
        if rv {
            add_into(self.acc(v).unwrap(), &gv);
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn gather_cols(src: &[f64], width: usize, start: usize, w: usize, dst: &mut [f64]) {
    for (drow, srow) in dst.chunks_mut(w).zip(src.chunks(width)) {
        drow.copy_from_slice(&srow[start..start + w]);
    }
}

fn scatter_cols(src: &[f64], dst: &mut [f64], width: usize, start: usize, w: usize, accumulate: bool) {
    for (srow, drow) in src.chunks(w).zip(dst.chunks_mut(width)) {
        if accumulate {
            add_into(&mut drow[start..start + w], srow);
        } else {
            drow[start..start + w].copy_from_slice(srow);
        }
    }
}
