//! The full byte path: patcher, encoder, projections, body and decoder.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::{Body, BodyConfig, BodyOutput};
use crate::decoder::{DecoderProjection, LocalDecoder};
use crate::encoder::{init_encoder_projection, ByteEmbedding, EncoderProjection, LocalEncoder};
use crate::entropy_lm::{row_entropies, ByteLm, EntropyLm, EntropyLmConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{log_softmax_rows, positions, INIT_STD};
use crate::params::ParamStore;
use crate::patching::{segment_entropy, segment_fixed, segment_whitespace, Patching, Strategy};
use crate::rng::seeded;
use crate::teacher::TokenLm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Entropy,
    Fixed,
    Whitespace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchingConfig {
    pub strategy: StrategyKind,
    /// Entropy threshold in nats; calibrated to `target_mean_patch` when unset.
    pub threshold: Option<f64>,
    pub target_mean_patch: f64,
    pub stride: usize,
    /// Longest allowed patch; 0 disables the cap.
    pub max_patch_len: usize,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self { strategy: StrategyKind::Entropy, threshold: None, target_mean_patch: 4.0, stride: 4, max_patch_len: 64 }
    }
}

impl PatchingConfig {
    pub fn max_len(&self) -> Option<usize> {
        (self.max_patch_len > 0).then_some(self.max_patch_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(invalid!("fixed stride must be at least 1"));
        }
        if !(self.target_mean_patch >= 1.0) {
            return Err(invalid!("target mean patch size must be at least 1"));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(invalid!("entropy threshold must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub pool_heads: usize,
    pub rope_base: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { width: 128, encoder_layers: 4, decoder_layers: 4, heads: 4, mlp_width: 512, pool_heads: 4, rope_base: 10_000.0 }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        for h in [self.heads, self.pool_heads] {
            if h == 0 || !self.width.is_multiple_of(h) {
                return Err(invalid!("local width {} is not divisible by {h} heads", self.width));
            }
        }
        if !(self.width / self.heads).is_multiple_of(2) {
            return Err(invalid!("local head width must be even for rotary embeddings"));
        }
        if self.mlp_width == 0 {
            return Err(invalid!("local mlp width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub local: LocalConfig,
    pub body: BodyConfig,
    pub patching: PatchingConfig,
    pub entropy_lm: EntropyLmConfig,
    /// LayerNorm after both projections.
    pub projection_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            local: LocalConfig::default(),
            body: BodyConfig::default(),
            patching: PatchingConfig::default(),
            entropy_lm: EntropyLmConfig::default(),
            projection_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        self.body.validate()?;
        self.patching.validate()?;
        self.entropy_lm.validate()
    }
}

/// Segmentation rule for the byte path.
#[derive(Clone, Debug)]
pub enum PatcherKind {
    Entropy { lm: EntropyLm, threshold: f64 },
    Fixed { k: usize },
    Whitespace,
}

#[derive(Clone, Debug)]
pub struct Patcher {
    pub kind: PatcherKind,
    pub max_len: Option<usize>,
}

impl Patcher {
    pub fn fixed(k: usize) -> Self {
        Self { kind: PatcherKind::Fixed { k }, max_len: None }
    }

    pub fn strategy(&self) -> Strategy {
        match &self.kind {
            PatcherKind::Entropy { threshold, .. } => Strategy::Entropy { threshold: *threshold },
            PatcherKind::Fixed { k } => Strategy::FixedStride { k: *k },
            PatcherKind::Whitespace => Strategy::Whitespace,
        }
    }

    pub fn patch(&self, x: &[u8]) -> Result<Patching> {
        let p = self.patch_with_next(x)?;
        let b: Vec<usize> = p.boundaries().iter().copied().filter(|&i| i < x.len()).collect();
        Patching::new(b, x.len(), p.strategy())
    }

    /// Patching of `x` followed by one not-yet-known byte. The first
    /// `x.len()` positions agree with [`Patcher::patch`]. For whitespace
    /// patching the unknown byte is assumed not to be whitespace.
    pub fn patch_with_next(&self, x: &[u8]) -> Result<Patching> {
        let n = x.len() + 1;
        match &self.kind {
            PatcherKind::Entropy { lm, threshold } => {
                let h = row_entropies(&lm.log_probs(x)?);
                segment_entropy(&h, *threshold, self.max_len)
            }
            PatcherKind::Fixed { k } => {
                let p = segment_fixed(n, *k)?;
                cap(p.boundaries().to_vec(), n, self.max_len, p.strategy())
            }
            PatcherKind::Whitespace => {
                let mut ext = x.to_vec();
                ext.push(b'a');
                segment_whitespace(&ext, self.max_len)
            }
        }
    }

    /// Whether a boundary falls before position `x.len()`, given the
    /// boundaries already emitted over `x`.
    pub fn boundary_before_next(&self, x: &[u8], emitted: &[usize]) -> Result<bool> {
        let n = x.len();
        if n == 0 {
            return Ok(true);
        }
        let last = emitted.last().copied().unwrap_or(0);
        if self.max_len.is_some_and(|c| n - last >= c) {
            return Ok(true);
        }
        Ok(match &self.kind {
            PatcherKind::Entropy { lm, threshold } => {
                let lp = lm.log_probs(x)?;
                let h = row_entropies(&lp.slice_rows(n, n + 1));
                h[0] > *threshold
            }
            PatcherKind::Fixed { k } => n.is_multiple_of(*k),
            PatcherKind::Whitespace => x[n - 1].is_ascii_whitespace(),
        })
    }
}

fn cap(boundaries: Vec<usize>, n: usize, max_len: Option<usize>, strategy: Strategy) -> Result<Patching> {
    let Some(c) = max_len else {
        return Patching::new(boundaries, n, strategy);
    };
    let mut out = Vec::with_capacity(boundaries.len());
    let mut ends = boundaries.clone();
    ends.push(n);
    for w in ends.windows(2) {
        let mut s = w[0];
        while s < w[1] {
            out.push(s);
            s += c;
        }
    }
    Patching::new(out, n, strategy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `n x 256` byte logits.
    pub logits: Var,
    pub body_input: Var,
    pub body: BodyOutput,
}

#[derive(Clone, Debug)]
pub struct ByteModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ByteEmbedding,
    pub encoder: LocalEncoder,
    pub enc_proj: EncoderProjection,
    pub body: Body,
    pub dec_proj: DecoderProjection,
    pub decoder: LocalDecoder,
    pub patcher: Patcher,
}

impl ByteModel {
    /// Builds the adapter around a body. With a teacher, the body weights
    /// are copied from it and its embedding variance scales `W_enc`.
    pub fn new(config: ModelConfig, seed: u64, teacher: Option<&TokenLm>, patcher: Patcher) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let l = config.local;
        let embedding = ByteEmbedding::new(&mut store, l.width, &mut rng);
        let encoder = LocalEncoder::new(&mut store, l.width, l.encoder_layers, l.heads, l.mlp_width, l.pool_heads, l.rope_base, &mut rng);
        let variance = match teacher {
            Some(t) => {
                if t.body_config != config.body {
                    return Err(invalid!("teacher body configuration differs from the model's"));
                }
                t.embedding_variance()
            }
            None => INIT_STD * INIT_STD,
        };
        let enc_proj = init_encoder_projection(&mut store, variance, l.width, config.body.width, config.projection_norm, &mut rng)?;
        let body = Body::new(&mut store, config.body, &mut rng)?;
        if let Some(t) = teacher {
            store.copy_matching_from(&t.store, |n| n.starts_with("body."))?;
        }
        let dec_proj = DecoderProjection::new(&mut store, config.body.width, l.width, config.projection_norm, &mut rng);
        let decoder = LocalDecoder::new(&mut store, l.width, l.decoder_layers, l.heads, l.mlp_width, l.rope_base, &mut rng);
        Ok(Self { config, store, embedding, encoder, enc_proj, body, dec_proj, decoder, patcher })
    }

    /// Projected patch vectors `p~`, `m x body width`.
    pub fn body_input(&self, g: &mut Graph<'_>, x: &[u8], patching: &Patching) -> Result<Var> {
        let h = self.encoder.encode_bytes(g, &self.embedding, x)?;
        let p = self.encoder.pool_patches(g, h, patching)?;
        self.enc_proj.project_to_body(g, p)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &[u8], patching: &Patching) -> Result<ForwardOutput> {
        let input = self.body_input(g, x, patching)?;
        self.forward_from_body_input(g, x, patching, input)
    }

    /// Body and decoder given explicit body inputs.
    pub fn forward_from_body_input(&self, g: &mut Graph<'_>, x: &[u8], patching: &Patching, body_input: Var) -> Result<ForwardOutput> {
        let body = self.body.forward(g, body_input, &positions(patching.m()))?;
        let ctx = self.dec_proj.project_from_body(g, body.hidden)?;
        let logits = self.decoder.decode_logits(g, &self.embedding, x, ctx, patching)?;
        Ok(ForwardOutput { logits, body_input, body })
    }

    /// `log p(x_i | x_<i)` for every byte under a given patching.
    pub fn byte_log_probs(&self, x: &[u8], patching: &Patching) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, x, patching)?;
        let lp = log_softmax_rows(g.value(out.logits));
        Ok(x.iter().enumerate().map(|(i, &b)| lp.get(i, b as usize)).collect())
    }

    fn next_logits(&self, x: &[u8], boundaries: &[usize]) -> Result<Vec<f64>> {
        let mut ext = x.to_vec();
        ext.push(0);
        let p = Patching::new(boundaries.to_vec(), ext.len(), self.patcher.strategy())?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &ext, &p)?;
        Ok(g.value(out.logits).row(x.len()).to_vec())
    }

    /// Appends `max_bytes` bytes to `prompt`. Each new position's boundary
    /// is decided once from the bytes before it and never revisited.
    pub fn generate(&self, prompt: &[u8], max_bytes: usize, mode: SampleMode) -> Result<Vec<u8>> {
        if max_bytes == 0 {
            return Err(invalid!("max_bytes must be at least 1"));
        }
        let mut rng = match mode {
            SampleMode::Sample { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(invalid!("temperature must be positive"));
                }
                Some(seeded(seed))
            }
            SampleMode::Greedy => None,
        };
        let mut x = prompt.to_vec();
        let mut boundaries = if x.is_empty() { Vec::new() } else { self.patcher.patch(&x)?.boundaries().to_vec() };
        for _ in 0..max_bytes {
            if self.patcher.boundary_before_next(&x, &boundaries)? {
                boundaries.push(x.len());
            }
            let logits = self.next_logits(&x, &boundaries)?;
            let b = match (&mut rng, mode) {
                (Some(r), SampleMode::Sample { temperature, .. }) => sample_byte(&logits, temperature, r.random::<f64>()),
                _ => argmax(&logits),
            };
            x.push(b as u8);
        }
        Ok(x)
    }
}

impl ByteLm for ByteModel {
    fn log_probs(&self, x: &[u8]) -> Result<Tensor> {
        let p = self.patcher.patch_with_next(x)?;
        let mut ext = x.to_vec();
        ext.push(0);
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &ext, &p)?;
        Ok(log_softmax_rows(g.value(out.logits)))
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `softmax(logits / temperature)` at uniform `u`.
pub fn sample_byte(logits: &[f64], temperature: f64, u: f64) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let lse = crate::graph::log_sum_exp(&scaled);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, z) in scaled.iter().enumerate() {
        let p = libm::exp(z - lse);
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Builds the patcher named by `cfg`. Entropy patching needs a trained
/// model and, when no threshold is fixed, a calibration corpus.
pub fn build_patcher<'a>(cfg: &PatchingConfig, lm: Option<EntropyLm>, calibration: impl IntoIterator<Item = &'a [u8]>) -> Result<Patcher> {
    cfg.validate()?;
    let max_len = cfg.max_len();
    let kind = match cfg.strategy {
        StrategyKind::Fixed => PatcherKind::Fixed { k: cfg.stride },
        StrategyKind::Whitespace => PatcherKind::Whitespace,
        StrategyKind::Entropy => {
            let lm = lm.ok_or_else(|| Error::Precondition("entropy patching needs a trained entropy model".into()))?;
            let threshold = match cfg.threshold {
                Some(t) => t,
                None => crate::entropy_lm::calibrate_threshold(&lm, calibration, cfg.target_mean_patch, max_len)?,
            };
            PatcherKind::Entropy { lm, threshold }
        }
    };
    Ok(Patcher { kind, max_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            local: LocalConfig { width: 8, encoder_layers: 1, decoder_layers: 1, heads: 2, mlp_width: 16, pool_heads: 2, rope_base: 10_000.0 },
            body: BodyConfig { layers: 2, width: 16, heads: 2, mlp_width: 32, rope_base: 10_000.0 },
            patching: PatchingConfig { strategy: StrategyKind::Fixed, stride: 3, ..Default::default() },
            entropy_lm: EntropyLmConfig { layers: 1, width: 8, heads: 2, mlp_width: 16, context: 16, rope_base: 10_000.0 },
            projection_norm: true,
        }
    }

    #[test]
    fn log_probs_rows_are_distributions_and_match_teacher_forcing() {
        let m = ByteModel::new(tiny_config(), 1, None, Patcher::fixed(3)).unwrap();
        let x = b"patch me";
        let lp = m.log_probs(x).unwrap();
        assert_eq!(lp.shape(), (x.len() + 1, 256));
        for i in 0..lp.rows() {
            let s: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let direct = m.byte_log_probs(x, &m.patcher.patch(x).unwrap()).unwrap();
        for (i, &b) in x.iter().enumerate() {
            assert!((lp.get(i, b as usize) - direct[i]).abs() < 1e-12);
        }
        assert_eq!(m.log_probs(b"").unwrap().rows(), 1);
    }

    #[test]
    fn patch_with_next_extends_patch() {
        let ws = Patcher { kind: PatcherKind::Whitespace, max_len: Some(4) };
        for x in [&b"ab cd"[..], b"abcdefghij", b"a  ", b""] {
            let a = ws.patch(x).unwrap();
            let b = ws.patch_with_next(x).unwrap();
            assert_eq!(a.n() + 1, b.n());
            assert!(b.boundaries().starts_with(a.boundaries()));
        }
        let f = Patcher { kind: PatcherKind::Fixed { k: 5 }, max_len: Some(2) };
        assert_eq!(f.patch(b"abcdefg").unwrap().boundaries(), &[0, 2, 4, 5]);
    }

    #[test]
    fn greedy_generation_is_deterministic_and_incremental() {
        let m = ByteModel::new(tiny_config(), 3, None, Patcher::fixed(3)).unwrap();
        let a = m.generate(b"hi", 5, SampleMode::Greedy).unwrap();
        assert_eq!(a, m.generate(b"hi", 5, SampleMode::Greedy).unwrap());
        assert_eq!(a.len(), 7);
        assert_eq!(m.generate(b"", 1, SampleMode::Greedy).unwrap().len(), 1);
        assert!(m.generate(b"", 0, SampleMode::Greedy).is_err());
    }

    #[test]
    fn sampler_follows_the_cdf() {
        let logits = vec![0.0, libm::log(3.0)];
        assert_eq!(sample_byte(&logits, 1.0, 0.1), 0);
        assert_eq!(sample_byte(&logits, 1.0, 0.3), 1);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
