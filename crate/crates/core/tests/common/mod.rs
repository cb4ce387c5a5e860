#![allow(dead_code)]

use bytepatch_core::body::BodyConfig;
use bytepatch_core::entropy_lm::EntropyLmConfig;
use bytepatch_core::model::{LocalConfig, ModelConfig, PatchingConfig, StrategyKind};
use bytepatch_core::patching::{Patching, Strategy};
use rand::Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        local: LocalConfig { width: 8, encoder_layers: 1, decoder_layers: 2, heads: 2, mlp_width: 16, pool_heads: 2, rope_base: 10_000.0 },
        body: BodyConfig { layers: 2, width: 16, heads: 2, mlp_width: 32, rope_base: 10_000.0 },
        patching: PatchingConfig { strategy: StrategyKind::Fixed, stride: 3, max_patch_len: 0, ..Default::default() },
        entropy_lm: EntropyLmConfig { layers: 1, width: 8, heads: 2, mlp_width: 16, context: 32, rope_base: 10_000.0 },
        projection_norm: true,
    }
}

pub fn random_patching<R: Rng>(n: usize, rng: &mut R) -> Patching {
    let mut b = vec![0];
    for i in 1..n {
        if rng.random_bool(0.35) {
            b.push(i);
        }
    }
    Patching::new(b, n, Strategy::Whitespace).unwrap()
}

pub fn random_bytes<R: Rng>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.random()).collect()
}

pub fn max_row_diff(a: &bytepatch_core::Tensor, b: &bytepatch_core::Tensor, rows: std::ops::Range<usize>) -> f64 {
    rows.flat_map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}
