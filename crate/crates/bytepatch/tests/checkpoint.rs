use std::fs;

use bytepatch::checkpoint::{load_byte_model, load_entropy_lm, load_token_lm, read_checkpoint, save_byte_model, save_entropy_lm, save_token_lm};
use bytepatch::vocab_io::{load_vocab, save_vocab};
use bytepatch_core::body::BodyConfig;
use bytepatch_core::bpe::{train_bpe, BpeVocab};
use bytepatch_core::entropy_lm::{ByteLm, EntropyLm, EntropyLmConfig};
use bytepatch_core::model::{ByteModel, LocalConfig, ModelConfig, Patcher, PatcherKind, PatchingConfig, SampleMode, StrategyKind};
use bytepatch_core::teacher::TokenLm;
use bytepatch_core::train::{run_stage, Stage, TrainConfig};

fn small() -> ModelConfig {
    ModelConfig {
        local: LocalConfig { width: 8, encoder_layers: 1, decoder_layers: 1, heads: 2, mlp_width: 16, pool_heads: 2, rope_base: 10_000.0 },
        body: BodyConfig { layers: 2, width: 16, heads: 2, mlp_width: 32, rope_base: 10_000.0 },
        patching: PatchingConfig { strategy: StrategyKind::Fixed, stride: 3, max_patch_len: 0, ..Default::default() },
        entropy_lm: EntropyLmConfig { layers: 1, width: 8, heads: 2, mlp_width: 16, context: 32, rope_base: 10_000.0 },
        projection_norm: true,
    }
}

fn docs() -> Vec<Vec<u8>> {
    ["the cat sat on the mat", "a dog ran in the fog", "қазақ тілі", "one two three four"].iter().map(|s| s.as_bytes().to_vec()).collect()
}

#[test]
fn byte_model_round_trips_bit_exactly_with_entropy_patcher() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let lm = EntropyLm::new(cfg.entropy_lm, 3).unwrap();
    let patcher = Patcher { kind: PatcherKind::Entropy { lm, threshold: 5.0 }, max_len: Some(6) };
    let model = ByteModel::new(cfg, 9, None, patcher).unwrap();
    let p = dir.path().join("m.ckpt");
    save_byte_model(&p, &model, Some(Stage::A), None).unwrap();
    let back = load_byte_model(&p).unwrap();
    assert_eq!(back.stage, Some(Stage::A));
    assert!(back.state.is_none());
    assert_eq!(back.model.store.group_hashes(), model.store.group_hashes());
    for d in docs() {
        assert_eq!(back.model.log_probs(&d).unwrap(), model.log_probs(&d).unwrap());
    }
    let g1 = model.generate(b"the ", 8, SampleMode::Greedy).unwrap();
    let g2 = back.model.generate(b"the ", 8, SampleMode::Greedy).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn resume_from_disk_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = docs();
    let held = vec![b"the fog".to_vec()];
    let tcfg = TrainConfig { steps: 6, batch_size: 2, seq_cap: 16, eval_interval: 2, eval_docs: 1, ..TrainConfig::for_stage(Stage::A) };
    let mut full = ByteModel::new(small(), 4, None, Patcher::fixed(3)).unwrap();
    let full_report = run_stage(&mut full, &tcfg, None, &train, &held, None, |_| {}).unwrap();

    let mut part = ByteModel::new(small(), 4, None, Patcher::fixed(3)).unwrap();
    let first = TrainConfig { stop_after: Some(3), ..tcfg.clone() };
    let r1 = run_stage(&mut part, &first, None, &train, &held, None, |_| {}).unwrap();
    let p = dir.path().join("partial.ckpt");
    save_byte_model(&p, &part, Some(Stage::A), Some(&r1.state)).unwrap();
    let loaded = load_byte_model(&p).unwrap();
    let mut resumed = loaded.model;
    let r2 = run_stage(&mut resumed, &tcfg, None, &train, &held, loaded.state, |_| {}).unwrap();

    assert_eq!(resumed.store.group_hashes(), full.store.group_hashes());
    let records: Vec<_> = r1.records.iter().chain(&r2.records).cloned().collect();
    assert_eq!(records, full_report.records);
}

#[test]
fn token_and_entropy_models_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = train_bpe(docs().iter().map(Vec::as_slice), 270).unwrap();
    let lm = TokenLm::new(small().body, vocab.size(), 5).unwrap();
    let p = dir.path().join("t.ckpt");
    save_token_lm(&p, &lm).unwrap();
    let back = load_token_lm(&p).unwrap();
    let ids = vocab.encode(b"the cat").ids;
    assert_eq!(back.log_probs(&ids).unwrap(), lm.log_probs(&ids).unwrap());

    let e = EntropyLm::new(small().entropy_lm, 6).unwrap();
    let p = dir.path().join("e.ckpt");
    save_entropy_lm(&p, &e).unwrap();
    assert_eq!(load_entropy_lm(&p).unwrap().log_probs(b"abc").unwrap(), e.log_probs(b"abc").unwrap());
    assert!(load_token_lm(&p).is_err(), "kind mismatch must be rejected");
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let model = ByteModel::new(small(), 1, None, Patcher::fixed(3)).unwrap();
    let p = dir.path().join("m.ckpt");
    save_byte_model(&p, &model, None, None).unwrap();
    read_checkpoint(&p).unwrap();
    let bytes = fs::read(&p).unwrap();

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 1;
    fs::write(&p, &flipped).unwrap();
    assert!(read_checkpoint(&p).unwrap_err().to_string().contains("checksum"));

    fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(read_checkpoint(&p).is_err());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&p, &magic).unwrap();
    assert!(read_checkpoint(&p).is_err());

    let mut extra = bytes;
    extra.push(0);
    fs::write(&p, &extra).unwrap();
    assert!(read_checkpoint(&p).is_err());
}

#[test]
fn loading_into_a_different_shape_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ckpt");
    let lm = TokenLm::new(small().body, 300, 5).unwrap();
    save_token_lm(&p, &lm).unwrap();
    let raw = read_checkpoint(&p).unwrap();
    let mut other = TokenLm::new(BodyConfig { width: 24, ..small().body }, 300, 5).unwrap();
    assert!(raw.load_store(&p, "model", &mut other.store).is_err());
}

#[test]
fn vocab_round_trips_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = train_bpe(docs().iter().map(Vec::as_slice), 280).unwrap();
    let p = dir.path().join("v.json");
    save_vocab(&p, &vocab).unwrap();
    let back = load_vocab(&p).unwrap();
    assert_eq!(back.merge_bytes(), vocab.merge_bytes());
    for d in docs() {
        assert_eq!(back.encode(&d).ids, vocab.encode(&d).ids);
    }
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
    assert!(load_vocab(&p).is_err());
    save_vocab(&p, &BpeVocab::byte_level()).unwrap();
    assert_eq!(load_vocab(&p).unwrap().size(), 256);
}
