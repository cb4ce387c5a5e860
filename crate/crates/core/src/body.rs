//! The global transformer over patch vectors, with RoPE on patch indices
//! and named per-layer groups for selective unfreezing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{causal_ranges, Block, BlockDims, BlockGroups, LayerNorm};
use crate::params::{ParamPartition, ParamStore};

pub const GROUP_FINAL_NORM: &str = "body.final_norm";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub rope_base: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self { layers: 4, width: 256, heads: 4, mlp_width: 1024, rope_base: 10_000.0 }
    }
}

impl BodyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid!("body needs at least one layer"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid!("body width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !(self.width / self.heads).is_multiple_of(2) {
            return Err(invalid!("body head width {} must be even for rotary embeddings", self.width / self.heads));
        }
        if self.mlp_width == 0 || !(self.rope_base > 1.0) {
            return Err(invalid!("body mlp width must be positive and rope base above 1"));
        }
        Ok(())
    }
}

/// Which body groups train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyMode {
    AllFrozen,
    /// `W_Q, W_K, W_V, W_O` of every layer.
    AttentionOnly,
    /// Attention weights plus the pre-attention norm.
    AttentionPlusNorm,
    /// Every group of the last `k` layers.
    LastKFull(usize),
}

pub fn layer_prefix(l: usize) -> String {
    format!("body.layers.{l}")
}

fn layer_groups(l: usize) -> BlockGroups {
    let p = layer_prefix(l);
    BlockGroups {
        attn_q: format!("{p}.attn.q"),
        attn_k: format!("{p}.attn.k"),
        attn_v: format!("{p}.attn.v"),
        attn_o: format!("{p}.attn.o"),
        attn_norm: format!("{p}.attn.norm"),
        cross: format!("{p}.cross"),
        mlp: format!("{p}.mlp"),
    }
}

#[derive(Clone, Debug)]
pub struct BodyOutput {
    /// Final-normed hidden states, `m x width`.
    pub hidden: Var,
    /// Residual stream after each layer.
    pub layer_states: Vec<Var>,
    /// Self-attention node of each layer.
    pub attn: Vec<Var>,
}

/// Decoder-only stack over continuous inputs. It has no token embedding
/// and no output head.
#[derive(Clone, Debug)]
pub struct Body {
    pub config: BodyConfig,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl Body {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: BodyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = BlockDims {
            width: config.width,
            heads: config.heads,
            mlp_width: config.mlp_width,
            depth: config.layers,
            cross_attention: false,
        };
        let blocks = (0..config.layers)
            .map(|l| Block::new(store, &layer_prefix(l), &layer_groups(l), dims, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "body.final_norm", GROUP_FINAL_NORM, config.width);
        Ok(Self { config, blocks, final_norm })
    }

    /// Causal pass over `x` (`m x width`) with RoPE at `positions`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, positions: &[usize]) -> Result<BodyOutput> {
        let (m, w) = g.value(x).shape();
        if w != self.config.width {
            return Err(shape_err!("body input width {w}, expected {}", self.config.width));
        }
        if positions.len() != m {
            return Err(shape_err!("{} positions for {m} body inputs", positions.len()));
        }
        if positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(invalid!("body positions must be strictly increasing"));
        }
        let ranges = causal_ranges(m);
        let mut h = x;
        let mut layer_states = Vec::with_capacity(self.blocks.len());
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let o = b.forward(g, h, positions, &ranges, self.config.rope_base, None);
            h = o.out;
            layer_states.push(h);
            attn.push(o.attn);
        }
        let hidden = self.final_norm.forward(g, h);
        Ok(BodyOutput { hidden, layer_states, attn })
    }

    /// Sets the trainable flag of every body group per `mode`, leaving
    /// other groups untouched.
    pub fn partition_parameters(&self, store: &mut ParamStore, mode: BodyMode, final_norm: bool) -> Result<ParamPartition> {
        let layers = self.config.layers;
        if let BodyMode::LastKFull(k) = mode {
            if k == 0 || k > layers {
                return Err(invalid!("last_k_full({k}) needs 1 <= k <= {layers}"));
            }
        }
        store.set_trainable_where(false, |g| g.starts_with("body."));
        for l in 0..layers {
            let gr = layer_groups(l);
            let attn = [&gr.attn_q, &gr.attn_k, &gr.attn_v, &gr.attn_o];
            let mut on: Vec<&String> = Vec::new();
            match mode {
                BodyMode::AllFrozen => {}
                BodyMode::AttentionOnly => on.extend(attn),
                BodyMode::AttentionPlusNorm => {
                    on.extend(attn);
                    on.push(&gr.attn_norm);
                }
                BodyMode::LastKFull(k) => {
                    if l >= layers - k {
                        on.extend(attn);
                        on.push(&gr.attn_norm);
                        on.push(&gr.mlp);
                    }
                }
            }
            for g in on {
                store.set_group_trainable(g, true)?;
            }
        }
        if final_norm {
            store.set_group_trainable(GROUP_FINAL_NORM, true)?;
        }
        Ok(store.partition())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::positions;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn small() -> (ParamStore, Body) {
        let mut store = ParamStore::new();
        let cfg = BodyConfig { layers: 4, width: 16, heads: 2, mlp_width: 32, rope_base: 10_000.0 };
        let body = Body::new(&mut store, cfg, &mut seeded(3)).unwrap();
        (store, body)
    }

    #[test]
    fn single_position_ignores_rope_base() {
        let (store, mut body) = small();
        let x = Tensor::randn(1, 16, 1.0, &mut seeded(1));
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let a = body.forward(&mut g, xv, &[0]).unwrap().hidden;
        body.config.rope_base = 77.0;
        let b = body.forward(&mut g, xv, &[0]).unwrap().hidden;
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-15);
    }

    #[test]
    fn rejects_bad_positions_and_widths() {
        let (store, body) = small();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(3, 16));
        assert!(body.forward(&mut g, x, &[0, 2, 2]).is_err());
        assert!(body.forward(&mut g, x, &[0, 1]).is_err());
        let y = g.constant(Tensor::zeros(3, 8));
        assert!(body.forward(&mut g, y, &positions(3)).is_err());
        assert!(BodyConfig { width: 18, heads: 4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn partition_modes_set_expected_flags() {
        let (mut store, body) = small();
        let p = body.partition_parameters(&mut store, BodyMode::AllFrozen, false).unwrap();
        assert!(p.trainable_groups().is_empty());

        let p = body.partition_parameters(&mut store, BodyMode::AttentionOnly, false).unwrap();
        let on = p.trainable_groups();
        assert_eq!(on.len(), 16);
        assert!(on.iter().all(|g| [".q", ".k", ".v", ".o"].iter().any(|s| g.ends_with(s))));

        let p = body.partition_parameters(&mut store, BodyMode::AttentionPlusNorm, false).unwrap();
        assert_eq!(p.trainable_groups().len(), 20);

        let p = body.partition_parameters(&mut store, BodyMode::LastKFull(1), false).unwrap();
        let on = p.trainable_groups();
        assert_eq!(on.len(), 6);
        assert!(on.iter().all(|g| g.starts_with("body.layers.3.")));

        let p = body.partition_parameters(&mut store, BodyMode::AllFrozen, true).unwrap();
        assert_eq!(p.trainable_groups(), alloc::vec![GROUP_FINAL_NORM]);

        assert!(body.partition_parameters(&mut store, BodyMode::LastKFull(5), false).is_err());
        assert!(body.partition_parameters(&mut store, BodyMode::LastKFull(0), false).is_err());
    }
}
