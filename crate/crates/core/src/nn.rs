//! Transformer building blocks shared by the local encoder and decoder,
//! the entropy model, and the global body.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{AttnSpec, Graph, Rope, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(alloc::format!("{name}.weight"), group, Tensor::randn(d_out, d_in, std, rng), true);
        let bias = bias.then(|| store.add(alloc::format!("{name}.bias"), group, Tensor::zeros(1, d_out), false));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, d: usize) -> Self {
        let gamma = store.add(alloc::format!("{name}.gamma"), group, Tensor::full(1, d, 1.0), false);
        let beta = store.add(alloc::format!("{name}.beta"), group, Tensor::zeros(1, d), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Group names for each sublayer of a [`Block`].
#[derive(Clone, Debug)]
pub struct BlockGroups {
    pub attn_q: String,
    pub attn_k: String,
    pub attn_v: String,
    pub attn_o: String,
    pub attn_norm: String,
    pub cross: String,
    pub mlp: String,
}

impl BlockGroups {
    /// Every tensor of the block in one group.
    pub fn uniform(group: &str) -> Self {
        let s = String::from(group);
        Self {
            attn_q: s.clone(),
            attn_k: s.clone(),
            attn_v: s.clone(),
            attn_o: s.clone(),
            attn_norm: s.clone(),
            cross: s.clone(),
            mlp: s,
        }
    }
}

/// Shape of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Total layers in the stack; scales residual output projections.
    pub depth: usize,
    pub cross_attention: bool,
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub mlp: Mlp,
}

/// Outputs of [`Block::forward`]: the new residual stream plus the raw
/// self-attention node (for score inspection).
#[derive(Clone, Copy, Debug)]
pub struct BlockOut {
    pub out: Var,
    pub attn: Var,
}

/// Cross-attention inputs: context rows and, per query, the visible range.
#[derive(Clone, Copy, Debug)]
pub struct CrossInput<'a> {
    pub context: Var,
    pub ranges: &'a [(usize, usize)],
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        groups: &BlockGroups,
        dims: BlockDims,
        rng: &mut R,
    ) -> Self {
        let d = dims.width;
        let out_std = INIT_STD / libm::sqrt(2.0 * dims.depth.max(1) as f64);
        let f = |s: &str| alloc::format!("{prefix}.{s}");
        let attn = SelfAttention {
            norm: LayerNorm::new(store, &f("attn.norm"), &groups.attn_norm, d),
            q: Linear::new(store, &f("attn.q"), &groups.attn_q, d, d, true, INIT_STD, rng),
            k: Linear::new(store, &f("attn.k"), &groups.attn_k, d, d, true, INIT_STD, rng),
            v: Linear::new(store, &f("attn.v"), &groups.attn_v, d, d, true, INIT_STD, rng),
            o: Linear::new(store, &f("attn.o"), &groups.attn_o, d, d, true, out_std, rng),
            heads: dims.heads,
        };
        let cross = dims.cross_attention.then(|| CrossAttention {
            norm: LayerNorm::new(store, &f("cross.norm"), &groups.cross, d),
            q: Linear::new(store, &f("cross.q"), &groups.cross, d, d, true, INIT_STD, rng),
            k: Linear::new(store, &f("cross.k"), &groups.cross, d, d, true, INIT_STD, rng),
            v: Linear::new(store, &f("cross.v"), &groups.cross, d, d, true, INIT_STD, rng),
            o: Linear::new(store, &f("cross.o"), &groups.cross, d, d, true, out_std, rng),
            heads: dims.heads,
        });
        let mlp = Mlp {
            norm: LayerNorm::new(store, &f("mlp.norm"), &groups.mlp, d),
            fc1: Linear::new(store, &f("mlp.fc1"), &groups.mlp, d, dims.mlp_width, true, INIT_STD, rng),
            fc2: Linear::new(store, &f("mlp.fc2"), &groups.mlp, dims.mlp_width, d, true, out_std, rng),
        };
        Self { attn, cross, mlp }
    }

    /// Pre-norm block: `x + SelfAttn(LN x)`, then optional
    /// `+ CrossAttn(LN x, context)`, then `+ MLP(LN x)`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        positions: &[usize],
        ranges: &[(usize, usize)],
        rope_base: f64,
        cross: Option<CrossInput<'_>>,
    ) -> BlockOut {
        let a = &self.attn;
        let h = a.norm.forward(g, x);
        let q = a.q.forward(g, h);
        let k = a.k.forward(g, h);
        let v = a.v.forward(g, h);
        let rope = Rope { q_pos: positions, k_pos: positions, base: rope_base };
        let attn = g.attention(q, k, v, AttnSpec { heads: a.heads, ranges, rope: Some(rope) });
        let o = a.o.forward(g, attn);
        let mut x = g.add(x, o);

        if let (Some(c), Some(input)) = (&self.cross, cross) {
            let h = c.norm.forward(g, x);
            let q = c.q.forward(g, h);
            let k = c.k.forward(g, input.context);
            let v = c.v.forward(g, input.context);
            let y = g.attention(q, k, v, AttnSpec { heads: c.heads, ranges: input.ranges, rope: None });
            let o = c.o.forward(g, y);
            x = g.add(x, o);
        }

        let m = &self.mlp;
        let h = m.norm.forward(g, x);
        let h = m.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = m.fc2.forward(g, h);
        BlockOut { out: g.add(x, h), attn }
    }
}

/// Query `i` sees keys `0..=i`.
pub fn causal_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (0, i + 1)).collect()
}

/// Query `i` sees the last `window` keys up to and including `i`.
pub fn window_ranges(n: usize, window: usize) -> Vec<(usize, usize)> {
    let w = window.max(1);
    (0..n).map(|i| ((i + 1).saturating_sub(w), i + 1)).collect()
}

pub fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Row-wise log-softmax of a logits tensor.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let lse = crate::graph::log_sum_exp(logits.row(i));
        for v in out.row_mut(i) {
            *v -= lse;
        }
    }
    out
}
