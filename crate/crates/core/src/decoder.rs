//! Projection out of the body and the local byte decoder.
//!
//! Bytes of patch `j` cross-attend to a learned start context and to the
//! projected body outputs of patches `0..j`. The body output of patch `j`
//! itself is never visible to patch `j`, since the body only reads patch
//! `j` once all of its bytes exist.

use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::ByteEmbedding;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{causal_ranges, positions, Block, BlockDims, BlockGroups, CrossInput, LayerNorm, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::patching::Patching;
use crate::tensor::Tensor;

pub const GROUP_DEC_PROJ: &str = "adapter.dec_proj";
pub const GROUP_DECODER: &str = "adapter.decoder";

/// `p^ = Norm(W_dec h + b_dec)` into local width.
#[derive(Clone, Debug)]
pub struct DecoderProjection {
    pub linear: Linear,
    pub norm: Option<LayerNorm>,
}

impl DecoderProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, body_width: usize, d_local: usize, norm: bool, rng: &mut R) -> Self {
        let linear = Linear::new(store, "adapter.dec_proj", GROUP_DEC_PROJ, body_width, d_local, true, INIT_STD, rng);
        let norm = norm.then(|| LayerNorm::new(store, "adapter.dec_proj.norm", GROUP_DEC_PROJ, d_local));
        Self { linear, norm }
    }

    pub fn project_from_body(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let w = g.value(h).cols();
        if w != self.linear.d_in {
            return Err(shape_err!("body width {w} does not match projection input {}", self.linear.d_in));
        }
        let y = self.linear.forward(g, h);
        Ok(match &self.norm {
            Some(n) => n.forward(g, y),
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LocalDecoder {
    pub width: usize,
    pub rope_base: f64,
    /// Context row visible to every byte, standing in for "no patch yet".
    pub start_context: ParamId,
    /// Input row for byte 0, standing in for "no byte yet".
    pub bos: ParamId,
    pub blocks: Vec<Block>,
}

impl LocalDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        layers: usize,
        heads: usize,
        mlp_width: usize,
        rope_base: f64,
        rng: &mut R,
    ) -> Self {
        let start_context = store.add("adapter.decoder.start_context", GROUP_DECODER, Tensor::randn(1, width, INIT_STD, rng), false);
        let bos = store.add("adapter.decoder.bos", GROUP_DECODER, Tensor::randn(1, width, INIT_STD, rng), false);
        let dims = BlockDims { width, heads, mlp_width, depth: layers, cross_attention: true };
        let groups = BlockGroups::uniform(GROUP_DECODER);
        let blocks = (0..layers)
            .map(|l| Block::new(store, &alloc::format!("adapter.decoder.layers.{l}"), &groups, dims, rng))
            .collect();
        Self { width, rope_base, start_context, bos, blocks }
    }

    /// Teacher-forced byte logits, `n x 256`. Row `i` is the distribution of
    /// `x[i]` given `x[..i]` and the contexts of patches before the one
    /// holding byte `i`; the bytes of `x` feed in shifted right by one.
    pub fn decode_logits(&self, g: &mut Graph<'_>, emb: &ByteEmbedding, x: &[u8], contexts: Var, patching: &Patching) -> Result<Var> {
        let n = x.len();
        if n == 0 {
            return Err(Error::Empty("byte sequence"));
        }
        if patching.n() != n {
            return Err(invalid!("patching covers {} bytes, sequence has {n}", patching.n()));
        }
        let (m, w) = g.value(contexts).shape();
        if m != patching.m() || w != self.width {
            return Err(shape_err!("contexts are {m}x{w}, expected {}x{}", patching.m(), self.width));
        }
        let start = g.param(self.start_context);
        let ctx = g.concat_rows(&[start, contexts]);
        let cross: Vec<(usize, usize)> = patching.patch_of_bytes().iter().map(|&j| (0, j + 1)).collect();

        let bos = g.param(self.bos);
        let mut h = if n > 1 {
            let prev = emb.lookup(g, &x[..n - 1]);
            g.concat_rows(&[bos, prev])
        } else {
            bos
        };
        let pos = positions(n);
        let ranges = causal_ranges(n);
        for b in &self.blocks {
            h = b.forward(g, h, &pos, &ranges, self.rope_base, Some(CrossInput { context: ctx, ranges: &cross })).out;
        }
        let table = g.param(emb.table);
        Ok(g.linear(h, table, None))
    }
}
