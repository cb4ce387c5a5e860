//! The token-level language model whose transformer stack becomes the
//! frozen body. It also serves as the alignment teacher and the BPE
//! baseline for scoring.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::{Body, BodyConfig, BodyOutput};
use crate::bpe::BpeVocab;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{log_softmax_rows, positions, Linear, INIT_STD};
use crate::optim::{batch_gradients, AdamW, OptimConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{seeded, ModelRng};
use crate::tensor::Tensor;

pub const GROUP_TOKEN_EMBEDDING: &str = "teacher.token_embedding";
pub const GROUP_LM_HEAD: &str = "teacher.lm_head";

#[derive(Clone, Debug)]
pub struct TokenLm {
    pub body_config: BodyConfig,
    /// BPE tokens plus one beginning-of-sequence id.
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub body: Body,
    pub head: Linear,
}

impl TokenLm {
    pub fn new(body_config: BodyConfig, bpe_size: usize, seed: u64) -> Result<Self> {
        if bpe_size < 256 {
            return Err(invalid!("token vocabulary of {bpe_size} is below the byte floor"));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let vocab_size = bpe_size + 1;
        let d = body_config.width;
        let embedding = store.add("teacher.token_embedding", GROUP_TOKEN_EMBEDDING, Tensor::randn(vocab_size, d, INIT_STD, &mut rng), false);
        let body = Body::new(&mut store, body_config, &mut rng)?;
        let head = Linear::new(&mut store, "teacher.lm_head", GROUP_LM_HEAD, d, vocab_size, false, INIT_STD, &mut rng);
        Ok(Self { body_config, vocab_size, store, embedding, body, head })
    }

    pub fn bos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    /// `sigma_emb^2`: empirical variance of the token embedding table.
    pub fn embedding_variance(&self) -> f64 {
        self.store.value(self.embedding).variance()
    }

    /// Logits over `[BOS] ++ ids`; row `t` predicts `ids[t]`, and the last
    /// row predicts the token after `ids`.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<(Var, BodyOutput)> {
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(self.bos() as usize);
        for &t in ids {
            if t as usize >= self.vocab_size - 1 {
                return Err(invalid!("token id {t} outside vocabulary"));
            }
            seq.push(t as usize);
        }
        let table = g.param(self.embedding);
        let x = g.gather(table, &seq);
        let out = self.body.forward(g, x, &positions(seq.len()))?;
        let logits = self.head.forward(g, out.hidden);
        Ok((logits, out))
    }

    /// Mean next-token cross-entropy over every token of `ids`.
    pub fn loss(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let (logits, _) = self.forward(g, &ids[..ids.len() - 1])?;
        let targets: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &targets))
    }

    /// `(ids.len() + 1) x vocab` log-probabilities.
    pub fn log_probs(&self, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let (logits, _) = self.forward(&mut g, ids)?;
        Ok(log_softmax_rows(g.value(logits)))
    }

    /// Residual stream after each listed layer at every token of `ids`
    /// (the BOS row is dropped).
    pub fn layer_states(&self, ids: &[u32], layers: &[usize]) -> Result<Vec<Tensor>> {
        if let Some(&l) = layers.iter().find(|&&l| l >= self.body_config.layers) {
            return Err(invalid!("layer {l} out of range for {} body layers", self.body_config.layers));
        }
        let mut g = Graph::new(&self.store);
        let (_, out) = self.forward(&mut g, ids)?;
        Ok(layers
            .iter()
            .map(|&l| {
                let t = g.value(out.layer_states[l]);
                t.slice_rows(1, t.rows())
            })
            .collect())
    }

    /// Greedy continuation of `prompt` by `max_tokens` tokens; ties take
    /// the lowest id. BOS is never emitted.
    pub fn generate_greedy(&self, prompt: &[u32], max_tokens: usize) -> Result<Vec<u32>> {
        let mut ids = prompt.to_vec();
        for _ in 0..max_tokens {
            let lp = self.log_probs(&ids)?;
            let row = lp.row(lp.rows() - 1);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().take(self.vocab_size - 1) {
                if v > row[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
        }
        Ok(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage0Config {
    pub steps: u64,
    pub batch_size: usize,
    /// Tokens per training window.
    pub seq_cap: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Held-out sequences scored at each eval; 0 means all.
    pub eval_docs: usize,
    pub optim: OptimConfig,
}

impl Default for Stage0Config {
    fn default() -> Self {
        Self { steps: 600, batch_size: 8, seq_cap: 128, seed: 0, eval_interval: 100, eval_docs: 64, optim: OptimConfig::default() }
    }
}

impl Stage0Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_cap < 2 || self.eval_interval == 0 {
            return Err(invalid!("batch size and eval interval must be positive and seq_cap at least 2"));
        }
        self.optim.validate()
    }
}

/// Loss at one evaluation point of a pretraining run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub heldout_loss: f64,
}

/// Random window of at most `cap` items from `seq`.
pub fn sample_window<'a, T, R: Rng + ?Sized>(seq: &'a [T], cap: usize, rng: &mut R) -> &'a [T] {
    if seq.len() <= cap {
        return seq;
    }
    let start = rng.random_range(0..=seq.len() - cap);
    &seq[start..start + cap]
}

/// Mean per-token loss over held-out sequences (each truncated to `cap`).
pub fn heldout_token_loss(lm: &TokenLm, seqs: &[Vec<u32>], cap: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| !s.is_empty()) {
        let s = &s[..s.len().min(cap)];
        let mut g = Graph::new(&lm.store);
        let l = lm.loss(&mut g, s)?;
        total += g.value(l).item() * s.len() as f64;
        count += s.len();
    }
    if count == 0 {
        return Err(Error::Empty("held-out token sequences"));
    }
    Ok(total / count as f64)
}

/// Trains a fresh [`TokenLm`] on BPE-encoded documents.
pub fn pretrain_body(
    vocab: &BpeVocab,
    body_config: BodyConfig,
    train: &[Vec<u8>],
    heldout: &[Vec<u8>],
    cfg: &Stage0Config,
    mut on_eval: impl FnMut(&LossRecord),
) -> Result<TokenLm> {
    cfg.validate()?;
    let encode = |docs: &[Vec<u8>]| -> Vec<Vec<u32>> {
        docs.iter().map(|d| vocab.encode(d).ids).filter(|ids| !ids.is_empty()).collect()
    };
    let train_ids = encode(train);
    if train_ids.len() < cfg.batch_size {
        return Err(Error::Precondition(alloc::format!(
            "stage 0 corpus has {} usable documents, fewer than one batch of {}",
            train_ids.len(),
            cfg.batch_size
        )));
    }
    let mut held = encode(heldout);
    if cfg.eval_docs > 0 {
        held.truncate(cfg.eval_docs);
    }
    let mut lm = TokenLm::new(body_config, vocab.size(), cfg.seed)?;
    let mut rng: ModelRng = seeded(cfg.seed ^ 0x5354_4147_4530);
    let mut opt = AdamW::new(cfg.optim, &lm.store);
    let eval = |lm: &TokenLm, step, train_loss| -> Result<LossRecord> {
        let heldout_loss = if held.is_empty() { f64::NAN } else { heldout_token_loss(lm, &held, cfg.seq_cap)? };
        Ok(LossRecord { step, train_loss, heldout_loss })
    };
    on_eval(&eval(&lm, 0, None)?);
    let mut running = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<&[u32]> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..train_ids.len());
                sample_window(&train_ids[i], cfg.seq_cap, &mut rng)
            })
            .collect();
        let (mut grads, loss) = batch_gradients(&lm.store, &batch, |g, s| lm.loss(g, s))?;
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

/// Per-token log-probabilities of `continuation` after `context` under the
/// teacher, with each side tokenized separately.
pub fn token_continuation_log_probs(lm: &TokenLm, vocab: &BpeVocab, context: &[u8], continuation: &[u8]) -> Result<Vec<f64>> {
    let ctx = vocab.encode(context).ids;
    let cont = vocab.encode(continuation).ids;
    if cont.is_empty() {
        return Err(Error::Empty("continuation"));
    }
    let mut all = ctx.clone();
    all.extend_from_slice(&cont);
    let lp = lm.log_probs(&all[..all.len() - 1])?;
    Ok(cont.iter().enumerate().map(|(k, &t)| lp.get(ctx.len() + k, t as usize)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::bpe::train_bpe;

    fn cfg() -> BodyConfig {
        BodyConfig { layers: 2, width: 16, heads: 2, mlp_width: 32, rope_base: 10_000.0 }
    }

    #[test]
    fn embedding_variance_is_table_variance() {
        let lm = TokenLm::new(cfg(), 300, 1).unwrap();
        let t = lm.store.value(lm.embedding);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.len() as f64;
        assert!((lm.embedding_variance() - var).abs() < 1e-15);
    }

    #[test]
    fn pretraining_beats_uniform_and_is_deterministic() {
        let text: Vec<Vec<u8>> = (0..40).map(|i| alloc::format!("the cat sat on the mat number {} and the dog ran", i % 5).into_bytes()).collect();
        let vocab = train_bpe(text.iter().map(|d| d.as_slice()), 300).unwrap();
        let c = Stage0Config { steps: 60, batch_size: 4, seq_cap: 32, eval_interval: 30, ..Default::default() };
        let mut log = Vec::new();
        let lm = pretrain_body(&vocab, cfg(), &text[..32], &text[32..], &c, |r| log.push(*r)).unwrap();
        let last = log.last().unwrap().heldout_loss;
        assert!(last < libm::log(lm.vocab_size as f64), "{last}");
        let prompt = vocab.encode(b"the cat").ids;
        let a = lm.generate_greedy(&prompt, 5).unwrap();
        let lm2 = pretrain_body(&vocab, cfg(), &text[..32], &text[32..], &c, |_| {}).unwrap();
        assert_eq!(a, lm2.generate_greedy(&prompt, 5).unwrap());
        assert_eq!(a.len(), prompt.len() + 5);

        let few = Stage0Config { batch_size: 100, ..c };
        assert!(matches!(pretrain_body(&vocab, cfg(), &text, &text, &few, |_| {}), Err(Error::Precondition(_))));
    }

    #[test]
    fn continuation_scores_index_the_right_rows() {
        let lm = TokenLm::new(cfg(), 256, 2).unwrap();
        let vocab = BpeVocab::byte_level();
        let s = token_continuation_log_probs(&lm, &vocab, b"ab", b"cd").unwrap();
        let lp = lm.log_probs(b"abc".iter().map(|&b| b as u32).collect::<Vec<_>>().as_slice()).unwrap();
        assert_eq!(s, vec![lp.get(2, b'c' as usize), lp.get(3, b'd' as usize)]);
        assert!(token_continuation_log_probs(&lm, &vocab, b"ab", b"").is_err());
    }
}
