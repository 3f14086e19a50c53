//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients for every node that
//! (transitively) depends on a leaf created with `requires_grad`.
//!
//! Primitives operate on whole batched tensors; attention, layer norm and
//! softmax carry fused backward rules so a transformer forward pass records
//! tens of nodes, not millions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape.to_vec(), data).expect("tensor shape and data length must agree")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a + b` with `b` broadcast over the leading axes of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[.., k] x [k, m]`.
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GatherRows { table: Var, rows: Vec<usize> },
    GatherLast { x: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    SwapAxes { x: Var, shape: Vec<usize>, a: usize, b: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Maximum(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient or zeros when `v` did not influence the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("{what}: {sb:?} does not broadcast onto {sa:?}")));
        }
        Ok(())
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_suffix(a, b, what)?;
        let bv = self.value(b).data();
        let period = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(j, &x)| f(x, bv[j % period]))
            .collect();
        Ok(Tensor { shape: self.shape(a).to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| f(x)).collect() }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.map(a, f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { x: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        let out = self.broadcast_binary(a, b, "minimum", f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Minimum(a, b), rg))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "maximum")?;
        let out = self.broadcast_binary(a, b, "maximum", f64::max)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Maximum(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a[.., k] x b[k, m] -> [.., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, m) = (sb[0], sb[1]);
        let rows = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        gemm(rows, k, m, self.value(a).data(), (k, 1), self.value(b).data(), (m, 1), &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut data = v.data.clone();
        data.chunks_mut(d).for_each(softmax_in_place);
        let out = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut data = v.data.clone();
        for row in data.chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut data = v.data.clone();
        let mut inv_std = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            inv_std.push(s);
        }
        let out = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Rows of a `[v, d]` table: output `[rows.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let d = t.last_dim();
        let count = t.len() / d.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= count) {
            return Err(Error::Shape(format!("row {bad} out of range for {count} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data[r * d..(r + 1) * d]);
        }
        let out = Tensor { shape: vec![rows.len(), d], data };
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows { table, rows: rows.to_vec() }, rg))
    }

    /// Embedding lookup; same as [`Graph::gather_rows`].
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Pick `x[r, index[r]]` from a `[rows, c]` tensor.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let c = v.last_dim();
        let rows = v.len() / c.max(1);
        if index.len() != rows || index.iter().any(|&i| i >= c) {
            return Err(Error::Shape(format!("gather_last: {} indices for {rows}x{c}", index.len())));
        }
        let data = index.iter().enumerate().map(|(r, &i)| v.data[r * c + i]).collect();
        let out = Tensor { shape: vec![rows], data };
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherLast { x, index: index.to_vec() }, rg))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape(format!("concat: {s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let data = v.data.chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape.clone();
        shape.pop();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::SumLast(a), rg)
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim() as f64;
        let s = self.sum_last(a);
        self.scale(s, 1.0 / d)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Exchange two axes.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::Shape(format!("swap_axes({a}, {b}) on {shape:?}")));
        }
        let data = permute(self.value(x).data(), &shape, a, b);
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::SwapAxes { x, shape, a, b }, rg))
    }

    /// Multi-head scaled dot-product attention over `[groups, len, dim]`.
    ///
    /// `key_mask[g * len + j]` false excludes key `j` in group `g`. A query
    /// whose keys are all excluded produces a zero vector.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "attention wants equal [g, l, d] shapes, got {:?} {:?} {:?}",
                shape,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (groups, len, dim) = (shape[0], shape[1], shape[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("{dim} not divisible into {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != groups * len {
                return Err(Error::Shape(format!("attention mask has {} entries", m.len())));
            }
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; groups * len * dim];
        let mut probs = vec![0.0; groups * heads * len * len];
        for g in 0..groups {
            let base = g * len * dim;
            let allowed = |j: usize| key_mask.map_or(true, |m| m[g * len + j]);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let p = &mut probs[((g * heads + h) * len + i) * len..][..len];
                    let qi = &qd[base + i * dim + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if allowed(j) {
                            let kj = &kd[base + j * dim + off..][..dh];
                            p[j] = dot(qi, kj) * scale;
                            max = max.max(p[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..len {
                        if allowed(j) {
                            p[j] = (p[j] - max).exp();
                            z += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    let oi = &mut out[base + i * dim + off..][..dh];
                    for j in 0..len {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vj = &vd[base + j * dim + off..][..dh];
                            oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += p[j] * x);
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor { shape, data: out }, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Populate gradients of the scalar `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    let p = g.len();
                    for (j, &x) in gout.iter().enumerate() {
                        g[j % p] += sign * x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let p = bv.len();
                acc(*a, &mut |g| {
                    for (j, &x) in gout.iter().enumerate() {
                        g[j] += x * bv[j % p];
                    }
                });
                acc(*b, &mut |g| {
                    for (j, &x) in gout.iter().enumerate() {
                        g[j % p] += x * av[j];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(g, &x)| *g += f * x)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gout)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, m) = (sb[0], sb[1]);
                let rows = self.value(*a).len() / k.max(1);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC * B^T ; dB = A^T * dC
                acc(*a, &mut |g| gemm(rows, m, k, gout, (m, 1), bv, (1, m), g, 1.0));
                acc(*b, &mut |g| gemm(k, rows, m, av, (1, k), gout, (m, 1), g, 1.0));
                let _ = sa;
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * gelu_parts(x[j]).1;
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * (1.0 - out.data[j] * out.data[j]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |g| {
                for j in 0..g.len() {
                    g[j] += gout[j] * out.data[j];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] / x[j];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += 2.0 * x[j] * gout[j];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for j in 0..g.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // Ties route to the first operand.
                let first = |j: usize| if take_min { av[j] <= bv[j] } else { av[j] >= bv[j] };
                acc(*a, &mut |g| {
                    for j in 0..g.len() {
                        if first(j) {
                            g[j] += gout[j];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for j in 0..g.len() {
                        if !first(j) {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                acc(*a, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(d).zip(out.data.chunks(d)).zip(gout.chunks(d)) {
                        let inner = dot(yr, dr);
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                acc(*a, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(d).zip(out.data.chunks(d)).zip(gout.chunks(d)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..d {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let d = out.last_dim();
                acc(*x, &mut |g| {
                    for (r, ((gr, yr), dr)) in
                        g.chunks_mut(d).zip(out.data.chunks(d)).zip(gout.chunks(d)).enumerate()
                    {
                        let mean_d = dr.iter().sum::<f64>() / d as f64;
                        let mean_dy = dot(dr, yr) / d as f64;
                        for j in 0..d {
                            gr[j] += inv_std[r] * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let d = out.last_dim();
                acc(*table, &mut |g| {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &gout[o * d..(o + 1) * d]);
                    }
                });
            }
            Op::GatherLast { x, index } => {
                let c = self.value(*x).last_dim();
                acc(*x, &mut |g| {
                    for (r, &i) in index.iter().enumerate() {
                        g[r * c + i] += gout[r];
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    acc(p, &mut |g| {
                        for r in 0..rows {
                            add_into(&mut g[r * w..(r + 1) * w], &gout[r * total + offset..][..w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SumAll(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gout[0])),
            Op::SumLast(a) => {
                let d = self.value(*a).last_dim();
                acc(*a, &mut |g| {
                    for (r, gr) in g.chunks_mut(d).enumerate() {
                        gr.iter_mut().for_each(|x| *x += gout[r]);
                    }
                });
            }
            Op::SwapAxes { x, shape, a, b } => {
                let mut swapped = shape.clone();
                swapped.swap(*a, *b);
                let back = permute(gout, &swapped, *a, *b);
                acc(*x, &mut |g| add_into(g, &back));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (groups, len, dim) = (s[0], s[1], s[2]);
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut ds = vec![0.0; len];
                for g in 0..groups {
                    let base = g * len * dim;
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..len {
                            let p = &probs[((g * heads + h) * len + i) * len..][..len];
                            let go = &gout[base + i * dim + off..][..dh];
                            let mut inner = 0.0;
                            for j in 0..len {
                                if p[j] == 0.0 {
                                    ds[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[base + j * dim + off..][..dh];
                                ds[j] = dot(go, vj);
                                inner += p[j] * ds[j];
                                let dvj = &mut dv[base + j * dim + off..][..dh];
                                dvj.iter_mut().zip(go).for_each(|(d, &x)| *d += p[j] * x);
                            }
                            for j in 0..len {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let w = p[j] * (ds[j] - inner) * scale;
                                for c in 0..dh {
                                    dq[base + i * dim + off + c] += w * kd[base + j * dim + off + c];
                                    dk[base + j * dim + off + c] += w * qd[base + i * dim + off + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a(m x k) * b(k x n) + beta * c`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the strides describe dense row-major or transposed views that
    // stay inside `a`, `b` and `c`, which callers size as m*k, k*n, m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute(data: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut src_strides = strides.clone();
    src_strides.swap(a, b);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, grad)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_passes_through() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]));
        let y = g.matmul(id, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0, 2.5, 7.0]);
        let wrong = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.matmul(x, wrong).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(&[1, 1, 4], vec![0.3, -2.0, 1.0, 0.5]));
        let k = g.constant(Tensor::from_vec(&[1, 1, 4], vec![1.0, 1.0, -1.0, 2.0]));
        let v = g.constant(Tensor::from_vec(&[1, 1, 4], vec![9.0, 8.0, 7.0, 6.0]));
        let out = g.attention(q, k, v, None, 2).unwrap();
        assert_eq!(g.value(out).data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn masked_attention_ignores_excluded_keys() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 100.0, 200.0]));
        let out = g.attention(q, q, v, Some(&[true, false]), 1).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 1.0, 2.0]);
        let none = g.attention(q, q, v, Some(&[false, false]), 1).unwrap();
        assert!(g.value(none).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn squared_error_chain_rule() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(2.0));
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.constant(Tensor::scalar(5.0));
        let wx = g.mul(w, x).unwrap();
        let r = g.sub(wx, y).unwrap();
        let loss = g.square(r);
        g.backward(loss).unwrap();
        assert_abs_diff_eq!(g.grad(w).unwrap().item(), 6.0);
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn swap_axes_round_trips() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 3, 2], (0..12).map(f64::from).collect()));
        let y = g.swap_axes(x, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 2]);
        assert_eq!(&g.value(y).data()[..4], &[0.0, 1.0, 6.0, 7.0]);
        let z = g.swap_axes(y, 0, 1).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());
    }

    #[test]
    fn softmax_and_layer_norm_properties() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|j| ((j * 7919) % 23) as f64 * 0.37 - 3.0).collect();
        let x = g.constant(Tensor::from_vec(&[4, 6], data));
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let n = g.layer_norm(x, 1e-12);
        for row in g.value(n).data().chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn broadcast_rejects_bad_suffix() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_ok());
    }
}
