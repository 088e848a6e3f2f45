//! Reverse-mode differentiation over the fused operations the networks use.
//!
//! A [`Tape`] records one forward pass. Every node keeps its value; nodes
//! that depend on a trainable leaf also get a gradient during
//! [`Tape::backward`]. Frozen parameters are recorded as plain leaves, so no
//! gradient work is spent on them.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Base,
    Sync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub index: usize,
}

/// A named trainable tensor with a stable key.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub key: ParamKey,
    pub name: String,
    pub value: Tensor,
}

/// Hands out sequential keys within one parameter group.
pub struct ParamAllocator {
    group: ParamGroup,
    next: usize,
}

impl ParamAllocator {
    pub fn new(group: ParamGroup) -> Self {
        Self { group, next: 0 }
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        let key = ParamKey {
            group: self.group,
            index: self.next,
        };
        self.next += 1;
        Param {
            key,
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask, `queries x keys`, `true` = may attend.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn all(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allow: vec![true; queries * keys],
        }
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.keys + k]
    }
}

/// Layout of a grouped multi-head attention call.
///
/// Queries are `groups x q_len x width`, keys/values are
/// `kv_groups x kv_len x width` with `kv_groups` either 1 (shared) or equal
/// to `groups`. `width = heads * head_dim`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub groups: usize,
    pub q_len: usize,
    pub kv_groups: usize,
    pub kv_len: usize,
    pub mask: Option<Arc<AttentionMask>>,
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    width: usize,
    probs: Vec<f64>,
}

enum Op {
    Leaf(Option<ParamKey>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast { x: Var, y: Var, outer: usize, mid: usize, inner: usize },
    SwapAxes { x: Var, a: usize, b: usize, c: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Silu(Var),
    Offset(Var),
    Reshape(Var),
    Attention(Box<AttentionRecord>),
    Gather { table: Var, ids: Vec<usize> },
    Mse { x: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.per_node[v.0].as_deref()
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamKey, Tensor> {
        self.params
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensor has at least one dimension")
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Leaf that receives a gradient but is not a model parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), true)
    }

    pub fn param(&mut self, p: &Param, trainable: bool) -> Var {
        self.push(p.value.clone(), Op::Leaf(Some(p.key)), trainable)
    }

    /// `x @ w (+ b)` over the last dimension of `x`; `w` is `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let d_in = last_dim(xs);
        if ws.shape().len() != 2 || ws.shape()[0] != d_in {
            return Err(Error::ShapeMismatch {
                expected: vec![d_in, 0],
                got: ws.shape().to_vec(),
            });
        }
        let d_out = ws.shape()[1];
        let rows = xs.len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bs = self.value(b);
            if bs.len() != d_out {
                return Err(Error::ShapeMismatch {
                    expected: vec![d_out],
                    got: bs.shape().to_vec(),
                });
            }
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bs.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, d_in, d_out, 1.0, xs.data(), (d_in, 1), ws.data(), (d_out, 1), beta, &mut out, (d_out, 1));
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = d_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[o, m, i] + y[o, i]` for `x` viewed as `outer x mid x inner`.
    pub fn add_broadcast(&mut self, x: Var, y: Var, outer: usize, mid: usize, inner: usize) -> Result<Var> {
        let xs = self.value(x);
        let ys = self.value(y);
        if xs.len() != outer * mid * inner || ys.len() != outer * inner {
            return Err(Error::ShapeMismatch {
                expected: vec![outer, mid, inner],
                got: vec![xs.len(), ys.len()],
            });
        }
        let mut out = xs.data().to_vec();
        for o in 0..outer {
            let yrow = &ys.data()[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for (dst, &add) in out[base..base + inner].iter_mut().zip(yrow) {
                    *dst += add;
                }
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, Op::AddBroadcast { x, y, outer, mid, inner }, rg))
    }

    /// Reinterprets `x` as `a x b x c` and returns the `b x a x c` transpose.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize, c: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != a * b * c {
            return Err(Error::ShapeMismatch {
                expected: vec![a, b, c],
                got: xs.shape().to_vec(),
            });
        }
        let out = swap_data(xs.data(), a, b, c);
        let value = Tensor::new(vec![b * a, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SwapAxes { x, a, b, c }, rg))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xs = self.value(x);
        let gs = self.value(gain);
        let d = last_dim(xs);
        if gs.len() != d {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                got: gs.shape().to_vec(),
            });
        }
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for (row, dst) in xs.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for ((o, &v), &g) in dst.iter_mut().zip(row).zip(gs.data()) {
                *o = v * r * g;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::Offset(x), rg)
    }

    /// Same data viewed as rows of width `cols`.
    pub fn reshape_rows(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xs = self.value(x);
        if cols == 0 || xs.len() % cols != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, cols],
                got: xs.shape().to_vec(),
            });
        }
        let value = xs.clone().reshape(&[xs.len() / cols, cols])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.value(table);
        let (rows, d) = (ts.shape()[0], last_dim(ts));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Constraint(format!("gather index {id} out of range {rows}")));
            }
            out.extend_from_slice(&ts.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Mean squared error against a constant target; a scalar node.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != target.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![xs.len()],
                got: vec![target.len()],
            });
        }
        let sum: f64 = xs.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::new(vec![1], vec![sum / target.len() as f64])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mse { x, target: target.to_vec() }, rg))
    }

    /// Grouped multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let width = last_dim(qs);
        if spec.heads == 0 || width % spec.heads != 0 {
            return Err(Error::Config(format!("width {width} not divisible into {} heads", spec.heads)));
        }
        if spec.kv_groups != 1 && spec.kv_groups != spec.groups {
            return Err(Error::Config("kv_groups must be 1 or equal to groups".into()));
        }
        if qs.len() != spec.groups * spec.q_len * width {
            return Err(Error::ShapeMismatch {
                expected: vec![spec.groups, spec.q_len, width],
                got: qs.shape().to_vec(),
            });
        }
        let kv_len = spec.kv_groups * spec.kv_len * width;
        if ks.len() != kv_len || vs.len() != kv_len {
            return Err(Error::ShapeMismatch {
                expected: vec![spec.kv_groups, spec.kv_len, width],
                got: vec![ks.len(), vs.len()],
            });
        }
        if let Some(mask) = &spec.mask {
            if mask.queries != spec.q_len || mask.keys != spec.kv_len {
                return Err(Error::ShapeMismatch {
                    expected: vec![spec.q_len, spec.kv_len],
                    got: vec![mask.queries, mask.keys],
                });
            }
            if let Some(row) = (0..mask.queries).find(|&r| !(0..mask.keys).any(|c| mask.get(r, c))) {
                return Err(Error::FullyMaskedRow { row });
            }
        }
        let heads = spec.heads;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let mut probs = vec![0.0; spec.groups * heads * lq * lk];
        let mut out = vec![0.0; qs.len()];
        for g in 0..spec.groups {
            let kg = if spec.kv_groups == 1 { 0 } else { g };
            for h in 0..heads {
                let q_off = g * lq * width + h * dh;
                let kv_off = kg * lk * width + h * dh;
                let p_off = (g * heads + h) * lq * lk;
                let scores = &mut probs[p_off..p_off + lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qs.data()[q_off..],
                    (width, 1),
                    &ks.data()[kv_off..],
                    (1, width),
                    0.0,
                    scores,
                    (lk, 1),
                );
                for (r, row) in scores.chunks_exact_mut(lk).enumerate() {
                    softmax_row(row, spec.mask.as_deref().map(|m| &m.allow[r * lk..(r + 1) * lk]));
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    1.0,
                    scores,
                    (lk, 1),
                    &vs.data()[kv_off..],
                    (width, 1),
                    0.0,
                    &mut out[q_off..],
                    (width, 1),
                );
            }
        }
        let value = Tensor::new(qs.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let record = AttentionRecord {
            q,
            k,
            v,
            spec,
            width,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(record)), rg))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut params = BTreeMap::new();
        if !self.rg(loss) {
            return Gradients { per_node: grads, params };
        }
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            if let Op::Leaf(key) = node.op {
                if let Some(key) = key {
                    let t = Tensor::new(node.value.shape().to_vec(), dy.clone()).expect("grad shape");
                    params.insert(key, t);
                }
                grads[idx] = Some(dy);
            } else {
                grads[idx] = Some(dy);
            }
        }
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf(_) => {}
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let d_in = ws.shape()[0];
                let d_out = ws.shape()[1];
                let rows = xs.len() / d_in;
                if self.rg(*x) {
                    let gx = accumulate(&mut grads[x.0], xs.len());
                    gemm(rows, d_out, d_in, 1.0, dy, (d_out, 1), ws.data(), (1, d_out), 1.0, gx, (d_in, 1));
                }
                if self.rg(*w) {
                    let gw = accumulate(&mut grads[w.0], ws.len());
                    gemm(d_in, rows, d_out, 1.0, xs.data(), (1, d_in), dy, (d_out, 1), 1.0, gw, (d_out, 1));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = accumulate(&mut grads[b.0], d_out);
                        for row in dy.chunks_exact(d_out) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let g = accumulate(&mut grads[v.0], dy.len());
                        for (g, &d) in g.iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::AddBroadcast { x, y, outer, mid, inner } => {
                if self.rg(*x) {
                    let g = accumulate(&mut grads[x.0], dy.len());
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.rg(*y) {
                    let g = accumulate(&mut grads[y.0], outer * inner);
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            for (gi, &d) in g[o * inner..(o + 1) * inner].iter_mut().zip(&dy[base..base + inner]) {
                                *gi += d;
                            }
                        }
                    }
                }
            }
            Op::SwapAxes { x, a, b, c } => {
                if self.rg(*x) {
                    let back = swap_data(dy, *b, *a, *c);
                    let g = accumulate(&mut grads[x.0], dy.len());
                    for (g, d) in g.iter_mut().zip(back) {
                        *g += d;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = self.value(*x);
                let gs = self.value(*gain);
                let d = gs.len();
                if self.rg(*gain) {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for ((row, dyr), &r) in xs.data().chunks_exact(d).zip(dy.chunks_exact(d)).zip(inv_rms) {
                        for ((g, &xv), &dv) in gg.iter_mut().zip(row).zip(dyr) {
                            *g += dv * xv * r;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = accumulate(&mut grads[x.0], xs.len());
                    for (((row, dyr), gxr), &r) in xs
                        .data()
                        .chunks_exact(d)
                        .zip(dy.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(inv_rms)
                    {
                        let dot: f64 = row.iter().zip(dyr).zip(gs.data()).map(|((&xv, &dv), &g)| dv * g * xv).sum();
                        let coeff = r * r * r * dot / d as f64;
                        for (((o, &xv), &dv), &g) in gxr.iter_mut().zip(row).zip(dyr).zip(gs.data()) {
                            *o += r * dv * g - coeff * xv;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let g = accumulate(&mut grads[x.0], xs.len());
                    for ((g, &xv), &d) in g.iter_mut().zip(xs.data()).zip(dy) {
                        let s = sigmoid(xv);
                        *g += d * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    let g = accumulate(&mut grads[x.0], dy.len());
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let ts = self.value(*table);
                    let d = last_dim(ts);
                    let g = accumulate(&mut grads[table.0], ts.len());
                    for (row, &id) in dy.chunks_exact(d).zip(ids) {
                        for (gi, &dv) in g[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *gi += dv;
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                if self.rg(*x) {
                    let xs = self.value(*x);
                    let scale = 2.0 * dy[0] / target.len() as f64;
                    let g = accumulate(&mut grads[x.0], xs.len());
                    for ((g, &xv), &t) in g.iter_mut().zip(xs.data()).zip(target) {
                        *g += scale * (xv - t);
                    }
                }
            }
            Op::Attention(rec) => self.backprop_attention(rec, dy, grads),
        }
    }

    fn backprop_attention(&self, rec: &AttentionRecord, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let spec = &rec.spec;
        let width = rec.width;
        let heads = spec.heads;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (spec.q_len, spec.kv_len);
        let (qs, ks, vs) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let (need_q, need_k, need_v) = (self.rg(rec.q), self.rg(rec.k), self.rg(rec.v));
        let mut gq = need_q.then(|| vec![0.0; qs.len()]);
        let mut gk = need_k.then(|| vec![0.0; ks.len()]);
        let mut gv = need_v.then(|| vec![0.0; vs.len()]);
        let mut dp = vec![0.0; lq * lk];
        for g in 0..spec.groups {
            let kg = if spec.kv_groups == 1 { 0 } else { g };
            for h in 0..heads {
                let q_off = g * lq * width + h * dh;
                let kv_off = kg * lk * width + h * dh;
                let p_off = (g * heads + h) * lq * lk;
                let p = &rec.probs[p_off..p_off + lq * lk];
                if let Some(gv) = gv.as_mut() {
                    gemm(lk, lq, dh, 1.0, p, (1, lk), &dy[q_off..], (width, 1), 1.0, &mut gv[kv_off..], (width, 1));
                }
                if !(need_q || need_k) {
                    continue;
                }
                gemm(lq, dh, lk, 1.0, &dy[q_off..], (width, 1), &vs.data()[kv_off..], (1, width), 0.0, &mut dp, (lk, 1));
                for (prow, dprow) in p.chunks_exact(lk).zip(dp.chunks_exact_mut(lk)) {
                    let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dprow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(lq, lk, dh, scale, &dp, (lk, 1), &ks.data()[kv_off..], (width, 1), 1.0, &mut gq[q_off..], (width, 1));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(lk, lq, dh, scale, &dp, (1, lk), &qs.data()[q_off..], (width, 1), 1.0, &mut gk[kv_off..], (width, 1));
                }
            }
        }
        for (var, g) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            if let Some(g) = g {
                let slot = accumulate(&mut grads[var.0], g.len());
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }
}

fn swap_data(x: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * c;
            let dst = (j * a + i) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

fn softmax_row(row: &mut [f64], allow: Option<&[bool]>) {
    if let Some(allow) = allow {
        for (v, &ok) in row.iter_mut().zip(allow) {
            if !ok {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
