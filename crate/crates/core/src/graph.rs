//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for each forward pass. Parameter leaves
//! require gradients only when their group is trainable in the backing
//! [`ParamStore`], so frozen groups never receive a gradient and
//! subgraphs that depend only on frozen values are skipped in the
//! backward sweep. [`Graph::detach`] implements stop-gradient.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Rotary position parameters for an attention call.
#[derive(Clone, Copy, Debug)]
pub struct Rope<'a> {
    pub q_pos: &'a [usize],
    pub k_pos: &'a [usize],
    pub base: f64,
}

/// Shape of one attention call: head count and, for every query row, the
/// half-open range of key rows it may attend to. Keys outside the range
/// are masked (score `-inf` before the softmax).
#[derive(Clone, Copy, Debug)]
pub struct AttnSpec<'a> {
    pub heads: usize,
    pub ranges: &'a [(usize, usize)],
    pub rope: Option<Rope<'a>>,
}

struct RopeCache {
    q_pos: Vec<f64>,
    k_pos: Vec<f64>,
    base: f64,
}

struct AttnNode {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    ranges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    rope: Option<RopeCache>,
    qr: Tensor,
    kr: Tensor,
    /// `probs[h * total + offsets[i] + (j - lo_i)]`.
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    RepeatRow(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    Gelu(Var),
    Attention(Box<AttnNode>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Mse { x: Var, target: Tensor },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), self.store.is_trainable(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x W^T + b` with `W` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).shape();
        let (dout, win) = self.value(w).shape();
        assert_eq!(din, win, "linear: input width {din} vs weight width {win}");
        let mut out = Tensor::zeros(n, dout);
        gemm_nt(self.value(x).data(), n, din, self.value(w).data(), dout, out.data_mut(), 0.0);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, dout));
            for i in 0..n {
                for (o, bv) in out.row_mut(i).iter_mut().zip(bias.data()) {
                    *o += *bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "gather index {id} out of range {}", t.rows());
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            assert_eq!(self.value(p).cols(), d, "concat_rows: width mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, d, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Repeats a `1 x d` row `times` times.
    pub fn repeat_row(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows(), 1);
        let mut out = Tensor::zeros(times, v.cols());
        for i in 0..times {
            out.row_mut(i).copy_from_slice(v.data());
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatRow(x), rg)
    }

    /// Row-wise layer normalization with learned scale and shift (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * rs;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xhat.get(i, j) * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + libm::tanh(u))
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention with per-query key ranges
    /// and optional rotary embeddings on queries and keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec<'_>) -> Var {
        let (nq, d) = self.value(q).shape();
        let (nk, dk) = self.value(k).shape();
        assert_eq!(d, dk, "attention: query/key widths differ");
        assert_eq!(self.value(v).shape(), (nk, d), "attention: value shape");
        assert_eq!(spec.ranges.len(), nq, "attention: one key range per query");
        assert!(spec.heads > 0 && d % spec.heads == 0, "attention: width {d} not divisible by heads {}", spec.heads);
        let dh = d / spec.heads;
        let mut offsets = Vec::with_capacity(nq + 1);
        let mut total = 0;
        for &(lo, hi) in spec.ranges {
            assert!(lo < hi && hi <= nk, "attention: empty or out-of-range key range ({lo}, {hi}) over {nk} keys");
            offsets.push(total);
            total += hi - lo;
        }
        offsets.push(total);

        let mut qr = self.value(q).clone();
        let mut kr = self.value(k).clone();
        let rope = spec.rope.map(|r| {
            assert_eq!(r.q_pos.len(), nq);
            assert_eq!(r.k_pos.len(), nk);
            assert!(dh.is_multiple_of(2), "rotary embeddings need an even head width");
            RopeCache {
                q_pos: r.q_pos.iter().map(|&p| p as f64).collect(),
                k_pos: r.k_pos.iter().map(|&p| p as f64).collect(),
                base: r.base,
            }
        });
        if let Some(r) = &rope {
            rotate(&mut qr, &r.q_pos, spec.heads, r.base, false);
            rotate(&mut kr, &r.k_pos, spec.heads, r.base, false);
        }

        let scale = 1.0 / libm::sqrt(dh as f64);
        let vv = self.value(v);
        let mut out = Tensor::zeros(nq, d);
        let mut probs = vec![0.0; spec.heads * total];
        for h in 0..spec.heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let (lo, hi) = spec.ranges[i];
                let base = h * total + offsets[i];
                let p = &mut probs[base..base + (hi - lo)];
                let qi = &qr.row(i)[hs.clone()];
                let mut max = f64::NEG_INFINITY;
                for (pj, j) in p.iter_mut().zip(lo..hi) {
                    let s = dot(qi, &kr.row(j)[hs.clone()]) * scale;
                    *pj = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = libm::exp(*pj - max);
                    z += *pj;
                }
                let oi = &mut out.row_mut(i)[hs.clone()];
                for (pj, j) in p.iter_mut().zip(lo..hi) {
                    *pj /= z;
                    axpy(*pj, &vv.row(j)[hs.clone()], oi);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let node = AttnNode {
            q,
            k,
            v,
            heads: spec.heads,
            ranges: spec.ranges.to_vec(),
            offsets,
            rope,
            qr,
            kr,
            probs,
        };
        self.push(out, Op::Attention(Box::new(node)), rg)
    }

    /// Full pre-softmax score matrices (one per head, `nq x nk`) of an
    /// attention node, with masked entries set to `-inf`.
    pub fn attention_scores(&self, attn: Var) -> Option<Vec<Tensor>> {
        let Op::Attention(node) = &self.nodes[attn.0].op else {
            return None;
        };
        let (nq, d) = node.qr.shape();
        let nk = node.kr.rows();
        let dh = d / node.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mats = (0..node.heads)
            .map(|h| {
                let hs = h * dh..(h + 1) * dh;
                let mut m = Tensor::full(nq, nk, f64::NEG_INFINITY);
                for i in 0..nq {
                    let (lo, hi) = node.ranges[i];
                    for j in lo..hi {
                        m.set(i, j, dot(&node.qr.row(i)[hs.clone()], &node.kr.row(j)[hs.clone()]) * scale);
                    }
                }
                m
            })
            .collect();
        Some(mats)
    }

    /// Mean token cross-entropy (nats) of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, vocab) = lv.shape();
        assert_eq!(targets.len(), n, "cross_entropy: {} targets for {n} rows", targets.len());
        assert!(n > 0, "cross_entropy over zero rows");
        let mut probs = Tensor::zeros(n, vocab);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < vocab, "target {t} outside vocabulary {vocab}");
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for (p, &z) in probs.row_mut(i).iter_mut().zip(row) {
                *p = libm::exp(z - lse);
            }
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss / n as f64), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse: shape mismatch");
        let n = xv.len().max(1) as f64;
        let s = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mse { x, target }, rg)
    }

    /// `sum(x * weights)`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape());
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Gradients::for_store(self.store);
        self.backward_into(root, 1.0, &mut grads);
        grads
    }

    /// Accumulates `seed * d(root)/d(param)` into `grads` for every
    /// trainable parameter reached. `root` must be a scalar.
    pub fn backward_into(&self, root: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from a non-scalar");
        if !self.rg(root) {
            return;
        }
        let mut g: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(seed));
        for idx in (0..=root.0).rev() {
            let Some(dout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &dout, 1.0),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, din) = xv.shape();
                    let dout_w = wv.rows();
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(n, din);
                        gemm_nn(dout.data(), n, dout_w, wv.data(), din, dx.data_mut(), 0.0);
                        acc(&mut g, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor::zeros(dout_w, din);
                        gemm_tn(dout.data(), n, dout_w, xv.data(), din, dw.data_mut(), 0.0);
                        acc(&mut g, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = Tensor::zeros(1, dout_w);
                            for i in 0..n {
                                for (d, v) in db.data_mut().iter_mut().zip(dout.row(i)) {
                                    *d += *v;
                                }
                            }
                            acc(&mut g, *b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut g, *a, dout.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut g, *b, dout);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut g, *a, dout.map(|x| x * s));
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(dout.row(r)) {
                            *d += *v;
                        }
                    }
                    acc(&mut g, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            acc(&mut g, p, dout.slice_rows(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::RepeatRow(x) => {
                    let mut dx = Tensor::zeros(1, dout.cols());
                    for i in 0..dout.rows() {
                        for (d, v) in dx.data_mut().iter_mut().zip(dout.row(i)) {
                            *d += *v;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (n, d) = xhat.shape();
                    let gv = self.value(*gamma).data();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = Tensor::zeros(1, d);
                        let mut db = Tensor::zeros(1, d);
                        for i in 0..n {
                            for j in 0..d {
                                dg.data_mut()[j] += dout.get(i, j) * xhat.get(i, j);
                                db.data_mut()[j] += dout.get(i, j);
                            }
                        }
                        if self.rg(*gamma) {
                            acc(&mut g, *gamma, dg);
                        }
                        if self.rg(*beta) {
                            acc(&mut g, *beta, db);
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(n, d);
                        for i in 0..n {
                            let xh = xhat.row(i);
                            let dy = dout.row(i);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dxh = dy[j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let row = dx.row_mut(i);
                            for j in 0..d {
                                row[j] = rstd[i] * (dy[j] * gv[j] - m1 - xh[j] * m2);
                            }
                        }
                        acc(&mut g, *x, dx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dout;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = libm::tanh(u);
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Attention(node) => self.attention_backward(node, &dout, &mut g),
                Op::CrossEntropy { logits, targets, probs } => {
                    let n = targets.len() as f64;
                    let s = dout.item() / n;
                    let mut dz = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = dz.row_mut(i);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                    acc(&mut g, *logits, dz);
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let s = 2.0 * dout.item() / xv.len().max(1) as f64;
                    let dx = Tensor::from_vec(
                        xv.rows(),
                        xv.cols(),
                        xv.data().iter().zip(target.data()).map(|(a, b)| s * (a - b)).collect(),
                    );
                    acc(&mut g, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    let s = dout.item();
                    acc(&mut g, *x, weights.map(|w| w * s));
                }
            }
        }
    }

    fn attention_backward(&self, node: &AttnNode, dout: &Tensor, g: &mut [Option<Tensor>]) {
        let (nq, d) = node.qr.shape();
        let nk = node.kr.rows();
        let dh = d / node.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let total = *node.offsets.last().unwrap_or(&0);
        let vv = self.value(node.v);
        let mut dq = Tensor::zeros(nq, d);
        let mut dk = Tensor::zeros(nk, d);
        let mut dv = Tensor::zeros(nk, d);
        let mut dp = Vec::new();
        for h in 0..node.heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let (lo, hi) = node.ranges[i];
                let base = h * total + node.offsets[i];
                let p = &node.probs[base..base + (hi - lo)];
                let doi = &dout.row(i)[hs.clone()];
                dp.clear();
                let mut s = 0.0;
                for (&pj, j) in p.iter().zip(lo..hi) {
                    let dpj = dot(doi, &vv.row(j)[hs.clone()]);
                    axpy(pj, doi, &mut dv.row_mut(j)[hs.clone()]);
                    s += pj * dpj;
                    dp.push(dpj);
                }
                let qi = &node.qr.row(i)[hs.clone()];
                for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(lo..hi) {
                    let ds = pj * (dpj - s) * scale;
                    if ds != 0.0 {
                        axpy(ds, &node.kr.row(j)[hs.clone()], &mut dq.row_mut(i)[hs.clone()]);
                        axpy(ds, qi, &mut dk.row_mut(j)[hs.clone()]);
                    }
                }
            }
        }
        if let Some(r) = &node.rope {
            rotate(&mut dq, &r.q_pos, node.heads, r.base, true);
            rotate(&mut dk, &r.k_pos, node.heads, r.base, true);
        }
        if self.rg(node.q) {
            acc(g, node.q, dq);
        }
        if self.rg(node.k) {
            acc(g, node.k, dk);
        }
        if self.rg(node.v) {
            acc(g, node.v, dv);
        }
    }
}

fn acc(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut g[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>())
}

/// Rotates consecutive pairs `(2t, 2t+1)` within each head by
/// `pos * base^(-2t/dh)`; `inverse` rotates by the negated angle.
pub(crate) fn rotate(x: &mut Tensor, pos: &[f64], heads: usize, base: f64, inverse: bool) {
    let (n, d) = x.shape();
    let dh = d / heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half).map(|t| libm::pow(base, -2.0 * t as f64 / dh as f64)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..n {
        let row = x.row_mut(i);
        for (t, f) in inv_freq.iter().enumerate() {
            let angle = sign * pos[i] * f;
            let (s, c) = (libm::sin(angle), libm::cos(angle));
            for h in 0..heads {
                let a = h * dh + 2 * t;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}
