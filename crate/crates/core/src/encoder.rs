//! Byte embedding, local causal encoder, per-patch cross-attention pooling,
//! and the projection into body width.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{AttnSpec, Graph, Var};
use crate::nn::{causal_ranges, positions, Block, BlockDims, BlockGroups, LayerNorm, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::patching::Patching;
use crate::tensor::Tensor;

pub const GROUP_BYTE_EMBEDDING: &str = "adapter.byte_embedding";
pub const GROUP_ENCODER: &str = "adapter.encoder";
pub const GROUP_ENC_PROJ: &str = "adapter.enc_proj";

/// The 256-row byte table, shared by the encoder input, the decoder input,
/// and the decoder's tied output head.
#[derive(Clone, Debug)]
pub struct ByteEmbedding {
    pub table: ParamId,
    pub width: usize,
}

impl ByteEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let table = store.add("adapter.byte_embedding.table", GROUP_BYTE_EMBEDDING, Tensor::randn(256, width, INIT_STD, rng), false);
        Self { table, width }
    }

    pub fn lookup(&self, g: &mut Graph<'_>, x: &[u8]) -> Var {
        let ids: Vec<usize> = x.iter().map(|&b| b as usize).collect();
        let t = g.param(self.table);
        g.gather(t, &ids)
    }
}

#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub width: usize,
    pub rope_base: f64,
    pub blocks: Vec<Block>,
    pub pool_norm: LayerNorm,
    /// One learned query shared by every patch.
    pub query: ParamId,
    pub pool_k: Linear,
    pub pool_v: Linear,
    pub pool_heads: usize,
}

impl LocalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        layers: usize,
        heads: usize,
        mlp_width: usize,
        pool_heads: usize,
        rope_base: f64,
        rng: &mut R,
    ) -> Self {
        let dims = BlockDims { width, heads, mlp_width, depth: layers, cross_attention: false };
        let groups = BlockGroups::uniform(GROUP_ENCODER);
        let blocks = (0..layers)
            .map(|l| Block::new(store, &alloc::format!("adapter.encoder.layers.{l}"), &groups, dims, rng))
            .collect();
        let pool_norm = LayerNorm::new(store, "adapter.encoder.pool.norm", GROUP_ENCODER, width);
        let query = store.add("adapter.encoder.pool.query", GROUP_ENCODER, Tensor::randn(1, width, 1.0, rng), false);
        let pool_k = Linear::new(store, "adapter.encoder.pool.k", GROUP_ENCODER, width, width, true, INIT_STD, rng);
        let pool_v = Linear::new(store, "adapter.encoder.pool.v", GROUP_ENCODER, width, width, true, INIT_STD, rng);
        Self { width, rope_base, blocks, pool_norm, query, pool_k, pool_v, pool_heads }
    }

    /// Per-byte causal hidden states `n x width`. With no layers this is
    /// the embedding lookup itself.
    pub fn encode_bytes(&self, g: &mut Graph<'_>, emb: &ByteEmbedding, x: &[u8]) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::Empty("byte sequence"));
        }
        let mut h = emb.lookup(g, x);
        let pos = positions(x.len());
        let ranges = causal_ranges(x.len());
        for b in &self.blocks {
            h = b.forward(g, h, &pos, &ranges, self.rope_base, None).out;
        }
        Ok(h)
    }

    /// `p_j = CrossAttn(q, {h_i : i in patch j})`: the shared query attends
    /// over exactly the (normalized) byte states of each patch.
    pub fn pool_patches(&self, g: &mut Graph<'_>, h: Var, patching: &Patching) -> Result<Var> {
        let n = g.value(h).rows();
        if patching.n() != n {
            return Err(invalid!("patching covers {} bytes but {n} byte states were given", patching.n()));
        }
        if patching.m() == 0 {
            return Err(Error::Empty("patching"));
        }
        let ranges = patching.ranges();
        let hn = self.pool_norm.forward(g, h);
        let k = self.pool_k.forward(g, hn);
        let v = self.pool_v.forward(g, hn);
        let q = g.param(self.query);
        let q = g.repeat_row(q, patching.m());
        Ok(g.attention(q, k, v, AttnSpec { heads: self.pool_heads, ranges: &ranges, rope: None }))
    }
}

/// `p~ = Norm(W_enc p + b_enc)` into body width.
#[derive(Clone, Debug)]
pub struct EncoderProjection {
    pub linear: Linear,
    pub norm: Option<LayerNorm>,
}

impl EncoderProjection {
    pub fn project_to_body(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let w = g.value(p).cols();
        if w != self.linear.d_in {
            return Err(shape_err!("patch width {w} does not match projection input {}", self.linear.d_in));
        }
        let y = self.linear.forward(g, p);
        Ok(match &self.norm {
            Some(n) => n.forward(g, y),
            None => y,
        })
    }

    pub fn body_width(&self) -> usize {
        self.linear.d_out
    }
}

/// Projection whose weights are i.i.d. `N(0, embedding_variance / d_local)`
/// and bias zero, so projected patches start with the body's token
/// embedding scale when inputs have unit variance.
pub fn init_encoder_projection<R: Rng + ?Sized>(
    store: &mut ParamStore,
    embedding_variance: f64,
    d_local: usize,
    body_width: usize,
    norm: bool,
    rng: &mut R,
) -> Result<EncoderProjection> {
    if !(embedding_variance > 0.0) || !embedding_variance.is_finite() {
        return Err(invalid!("embedding variance must be positive and finite, got {embedding_variance}"));
    }
    if d_local == 0 || body_width == 0 {
        return Err(invalid!("projection widths must be positive"));
    }
    let std = libm::sqrt(embedding_variance / d_local as f64);
    let normal = Normal::new(0.0, std).map_err(|e| invalid!("{e}"))?;
    let data = (0..body_width * d_local).map(|_| normal.sample(rng)).collect();
    let weight = store.add("adapter.enc_proj.weight", GROUP_ENC_PROJ, Tensor::from_vec(body_width, d_local, data), true);
    let bias = store.add("adapter.enc_proj.bias", GROUP_ENC_PROJ, Tensor::zeros(1, body_width), false);
    let norm = norm.then(|| LayerNorm::new(store, "adapter.enc_proj.norm", GROUP_ENC_PROJ, body_width));
    Ok(EncoderProjection { linear: Linear { weight, bias: Some(bias), d_in: d_local, d_out: body_width }, norm })
}
