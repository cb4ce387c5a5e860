//! The small causal byte model whose next-byte entropy drives patching.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{log_softmax_rows, positions, window_ranges, Block, BlockDims, BlockGroups, LayerNorm, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::patching::{calibrate_threshold_from_entropies, segment_entropy, Patching};
use crate::optim::{batch_gradients, AdamW, OptimConfig};
use crate::rng::{seeded, ModelRng};
use crate::teacher::{sample_window, LossRecord};
use crate::tensor::Tensor;

/// A model of `p(x_i | x_{<i})` over the 256 byte values.
pub trait ByteLm {
    /// `x.len() + 1` rows of natural-log probabilities: row `i` is the
    /// distribution of byte `i` given `x[..i]`, and the last row predicts
    /// the byte that would follow `x`.
    fn log_probs(&self, x: &[u8]) -> Result<Tensor>;
}

impl<M: ByteLm + ?Sized> ByteLm for &M {
    fn log_probs(&self, x: &[u8]) -> Result<Tensor> {
        (**self).log_probs(x)
    }
}

/// Shannon entropy (nats) of each row of log-probabilities.
pub fn row_entropies(log_probs: &Tensor) -> Vec<f64> {
    (0..log_probs.rows())
        .map(|i| {
            let h: f64 = log_probs.row(i).iter().map(|&lp| if lp == f64::NEG_INFINITY { 0.0 } else { -libm::exp(lp) * lp }).sum();
            h.max(0.0)
        })
        .collect()
}

/// `H(x_i)` for every position `i` of `x`, in nats.
pub fn next_byte_entropy<M: ByteLm + ?Sized>(lm: &M, x: &[u8]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("entropy input"));
    }
    let mut h = row_entropies(&lm.log_probs(x)?);
    h.truncate(x.len());
    Ok(h)
}

/// Threshold whose mean patch size over `corpus` is within 10% of `target`.
pub fn calibrate_threshold<'a, M, I>(lm: &M, corpus: I, target: f64, max_len: Option<usize>) -> Result<f64>
where
    M: ByteLm + ?Sized,
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut all = Vec::new();
    for doc in corpus {
        if !doc.is_empty() {
            all.push(next_byte_entropy(lm, doc)?);
        }
    }
    calibrate_threshold_from_entropies(&all, target, max_len)
}

/// Entropy segmentation of `x` under `lm`.
pub fn entropy_patching<M: ByteLm + ?Sized>(lm: &M, x: &[u8], threshold: f64, max_len: Option<usize>) -> Result<Patching> {
    if x.is_empty() {
        return segment_entropy(&[], threshold, max_len);
    }
    segment_entropy(&next_byte_entropy(lm, x)?, threshold, max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyLmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Attention window in bytes.
    pub context: usize,
    pub rope_base: f64,
}

impl Default for EntropyLmConfig {
    fn default() -> Self {
        Self { layers: 4, width: 256, heads: 4, mlp_width: 1024, context: 512, rope_base: 10_000.0 }
    }
}

impl EntropyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || !(self.width / self.heads).is_multiple_of(2) {
            return Err(invalid!("entropy model width {} must split into an even head width over {} heads", self.width, self.heads));
        }
        if self.context == 0 {
            return Err(invalid!("entropy model context must be positive"));
        }
        Ok(())
    }
}

/// Causal byte transformer with a sliding attention window and a learned
/// start vector standing in for the empty prefix.
#[derive(Clone, Debug)]
pub struct EntropyLm {
    pub config: EntropyLmConfig,
    pub store: ParamStore,
    embed: ParamId,
    start: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl EntropyLm {
    pub fn new(config: EntropyLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let group = "entropy_lm";
        let embed = store.add("entropy_lm.embed", group, Tensor::randn(256, d, INIT_STD, &mut rng), false);
        let start = store.add("entropy_lm.start", group, Tensor::randn(1, d, INIT_STD, &mut rng), false);
        let dims = BlockDims { width: d, heads: config.heads, mlp_width: config.mlp_width, depth: config.layers, cross_attention: false };
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut store, &alloc::format!("entropy_lm.layers.{l}"), &BlockGroups::uniform(group), dims, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "entropy_lm.norm", group, d);
        let head = Linear::new(&mut store, "entropy_lm.head", group, d, 256, true, INIT_STD, &mut rng);
        Ok(Self { config, store, embed, start, blocks, norm, head })
    }

    /// Logits for every position of `x` plus the following one
    /// (`(x.len() + 1) x 256`).
    pub fn forward(&self, g: &mut Graph<'_>, x: &[u8]) -> Var {
        let ids: Vec<usize> = x.iter().map(|&b| b as usize).collect();
        let start = g.param(self.start);
        let mut h = if ids.is_empty() {
            start
        } else {
            let table = g.param(self.embed);
            let e = g.gather(table, &ids);
            g.concat_rows(&[start, e])
        };
        let n = ids.len() + 1;
        let pos = positions(n);
        let ranges = window_ranges(n, self.config.context);
        for b in &self.blocks {
            h = b.forward(g, h, &pos, &ranges, self.config.rope_base, None).out;
        }
        let h = self.norm.forward(g, h);
        self.head.forward(g, h)
    }

    pub fn logits(&self, x: &[u8]) -> Tensor {
        let mut g = Graph::new(&self.store);
        let v = self.forward(&mut g, x);
        g.value(v).clone()
    }

    /// Mean next-byte cross-entropy (nats) over every byte of `x`.
    pub fn loss(&self, g: &mut Graph<'_>, x: &[u8]) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::Empty("entropy model training document"));
        }
        let logits = self.forward(g, &x[..x.len() - 1]);
        let targets: Vec<usize> = x.iter().map(|&b| b as usize).collect();
        Ok(g.cross_entropy(logits, &targets))
    }
}

impl ByteLm for EntropyLm {
    fn log_probs(&self, x: &[u8]) -> Result<Tensor> {
        Ok(log_softmax_rows(&self.logits(x)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Bytes per training window.
    pub seq_cap: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Held-out documents scored at each eval; 0 means all.
    pub eval_docs: usize,
    pub optim: OptimConfig,
}

impl Default for EntropyTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 8, seq_cap: 256, seed: 0, eval_interval: 100, eval_docs: 32, optim: OptimConfig::default() }
    }
}

impl EntropyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_cap == 0 || self.eval_interval == 0 {
            return Err(invalid!("batch size, sequence cap and eval interval must be positive"));
        }
        self.optim.validate()
    }
}

/// Mean next-byte loss (nats) over held-out documents truncated to `cap`.
pub fn heldout_byte_loss(lm: &EntropyLm, docs: &[Vec<u8>], cap: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in docs.iter().filter(|d| !d.is_empty()) {
        let d = &d[..d.len().min(cap)];
        let mut g = Graph::new(&lm.store);
        let l = lm.loss(&mut g, d)?;
        total += g.value(l).item() * d.len() as f64;
        count += d.len();
    }
    if count == 0 {
        return Err(Error::Empty("held-out documents"));
    }
    Ok(total / count as f64)
}

/// Trains a fresh entropy model on raw byte documents.
pub fn train_entropy_lm(
    config: EntropyLmConfig,
    train: &[Vec<u8>],
    heldout: &[Vec<u8>],
    cfg: &EntropyTrainConfig,
    mut on_eval: impl FnMut(&LossRecord),
) -> Result<EntropyLm> {
    cfg.validate()?;
    let docs: Vec<&Vec<u8>> = train.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Empty("entropy model corpus"));
    }
    let mut held: Vec<Vec<u8>> = heldout.iter().filter(|d| !d.is_empty()).cloned().collect();
    if cfg.eval_docs > 0 {
        held.truncate(cfg.eval_docs);
    }
    let mut lm = EntropyLm::new(config, cfg.seed)?;
    let mut rng: ModelRng = seeded(cfg.seed ^ 0x454e_5452_4f50);
    let mut opt = AdamW::new(cfg.optim, &lm.store);
    let eval = |lm: &EntropyLm, step, train_loss| -> Result<LossRecord> {
        let heldout_loss = if held.is_empty() { f64::NAN } else { heldout_byte_loss(lm, &held, cfg.seq_cap)? };
        Ok(LossRecord { step, train_loss, heldout_loss })
    };
    on_eval(&eval(&lm, 0, None)?);
    let mut running = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&[u8]> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..docs.len());
                sample_window(docs[i], cfg.seq_cap, &mut rng)
            })
            .collect();
        let (mut grads, loss) = batch_gradients(&lm.store, &batch, |g, d| lm.loss(g, d))?;
        opt.step(&mut lm.store, &mut grads, cfg.steps);
        running.push(loss);
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let mean = running.iter().sum::<f64>() / running.len() as f64;
            running.clear();
            on_eval(&eval(&lm, step + 1, Some(mean))?);
        }
    }
    Ok(lm)
}
