mod common;

use bytepatch_core::body::BodyMode;
use bytepatch_core::bpe::BpeVocab;
use bytepatch_core::model::{ByteModel, Patcher};
use bytepatch_core::nn::log_softmax_rows;
use bytepatch_core::teacher::TokenLm;
use bytepatch_core::train::{
    loss_alignment, loss_byte_ce, run_stage, teacher_pooled_states, verify_frozen, Stage, Teacher, TrainConfig,
};
use bytepatch_core::optim::OptimConfig;
use bytepatch_core::{Error, Graph};
use common::tiny_config;

fn corpus() -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let train = (0..12).map(|i| format!("line {i}: the quick brown fox jumps").into_bytes()).collect();
    let held = vec![b"a lazy dog sleeps".to_vec(), b"the fox again".to_vec()];
    (train, held)
}

fn setup() -> (TokenLm, BpeVocab, ByteModel) {
    let teacher = TokenLm::new(tiny_config().body, 256, 9).unwrap();
    let model = ByteModel::new(tiny_config(), 1, Some(&teacher), Patcher::fixed(3)).unwrap();
    (teacher, BpeVocab::byte_level(), model)
}

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seq_cap: 24,
        eval_interval: 4,
        optim: OptimConfig { warmup_steps: 2, ..Default::default() },
        ..TrainConfig::for_stage(stage)
    }
}

fn changed(r: &bytepatch_core::train::StageReport) -> Vec<String> {
    let mut v: Vec<String> = r.changed_groups().into_iter().map(String::from).collect();
    v.sort();
    v
}

#[test]
fn stage_a_moves_exactly_the_adapter_and_stage_b_exactly_attention() {
    let (_, _, mut model) = setup();
    let (train, held) = corpus();
    let a = run_stage(&mut model, &cfg(Stage::A, 6), None, &train, &held, None, |_| {}).unwrap();
    let adapter = ["adapter.byte_embedding", "adapter.dec_proj", "adapter.decoder", "adapter.enc_proj", "adapter.encoder"];
    assert_eq!(changed(&a), adapter);
    let mut t = a.trainable_groups.clone();
    t.sort();
    assert_eq!(t, adapter);

    let b = run_stage(&mut model, &cfg(Stage::B, 6), None, &train, &held, None, |_| {}).unwrap();
    let mut want: Vec<String> = Vec::new();
    for l in 0..2 {
        for p in ["k", "o", "q", "v"] {
            want.push(format!("body.layers.{l}.attn.{p}"));
        }
    }
    assert_eq!(changed(&b), want);
    for (name, _) in &b.hashes_after {
        if name.starts_with("adapter.") || name.contains("mlp") || name.contains("norm") {
            assert!(!changed(&b).contains(name));
        }
    }
}

#[test]
fn other_body_modes_pick_their_groups() {
    let (_, _, mut model) = setup();
    let (train, held) = corpus();
    let c = TrainConfig { body_mode: Some(BodyMode::LastKFull(1)), train_final_norm: true, ..cfg(Stage::B, 3) };
    let r = run_stage(&mut model, &c, None, &train, &held, None, |_| {}).unwrap();
    let got = changed(&r);
    assert!(got.iter().all(|g| g.starts_with("body.layers.1.") || g == "body.final_norm"), "{got:?}");
    assert!(got.contains(&"body.layers.1.mlp".to_string()) && got.contains(&"body.final_norm".to_string()));

    let c = TrainConfig { body_mode: Some(BodyMode::AttentionPlusNorm), ..cfg(Stage::B, 3) };
    let r = run_stage(&mut model, &c, None, &train, &held, None, |_| {}).unwrap();
    assert!(changed(&r).contains(&"body.layers.0.attn.norm".to_string()));
    assert!(!changed(&r).iter().any(|g| g.contains("mlp")));
}

#[test]
fn zero_steps_leave_every_parameter_bitwise_unchanged() {
    let (_, _, mut model) = setup();
    let before = model.store.clone();
    let (train, held) = corpus();
    let r = run_stage(&mut model, &cfg(Stage::A, 0), None, &train, &held, None, |_| {}).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.records[0].step, 0);
    assert!(r.records[0].ce_nats_per_byte.is_none());
    for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let (train, held) = corpus();
    let (_, _, mut full) = setup();
    let all = run_stage(&mut full, &cfg(Stage::A, 8), None, &train, &held, None, |_| {}).unwrap();

    let (_, _, mut split) = setup();
    let first = TrainConfig { stop_after: Some(3), ..cfg(Stage::A, 8) };
    let r1 = run_stage(&mut split, &first, None, &train, &held, None, |_| {}).unwrap();
    assert_eq!(r1.state.step, 3);
    let r2 = run_stage(&mut split, &cfg(Stage::A, 8), None, &train, &held, Some(r1.state), |_| {}).unwrap();

    for ((_, a), (_, b)) in full.store.iter().zip(split.store.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
    let joined: Vec<_> = r1.records.iter().chain(&r2.records).cloned().collect();
    assert_eq!(all.records, joined);

    let (_, _, mut again) = setup();
    let rerun = run_stage(&mut again, &cfg(Stage::A, 8), None, &train, &held, None, |_| {}).unwrap();
    assert_eq!(rerun.records, all.records);
}

#[test]
fn first_record_decomposes_into_cross_entropy_and_alignment() {
    let (teacher, vocab, mut model) = setup();
    let doc = b"aligned text here".to_vec();
    let held = vec![b"held out".to_vec()];
    let alpha = 0.25;
    let c = TrainConfig { alpha, batch_size: 1, eval_interval: 1, seq_cap: 64, ..cfg(Stage::A, 1) };

    let p = model.patcher.patch(&doc).unwrap();
    let (ce, align) = {
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &doc, &p).unwrap();
        let ce = loss_byte_ce(g.value(out.logits), &doc).unwrap();
        let student = g.value(out.body.layer_states[1]).clone();
        let target = teacher_pooled_states(&teacher, &vocab, &doc, &p, &[1]).unwrap();
        (ce, loss_alignment(&[student], &target, alpha).unwrap())
    };
    let t = Teacher { lm: &teacher, vocab: &vocab };
    let r = run_stage(&mut model, &c, Some(t), &[doc], &held, None, |_| {}).unwrap();
    let rec = &r.records[1];
    assert!((rec.ce_nats_per_byte.unwrap() - ce).abs() < 1e-12);
    assert!((rec.align_loss.unwrap() - align).abs() < 1e-12);
    assert!(align > 0.0);
}

#[test]
fn heldout_bpb_record_matches_a_direct_computation() {
    let (_, _, mut model) = setup();
    let (train, held) = corpus();
    let before = model.clone();
    let r = run_stage(&mut model, &cfg(Stage::A, 1), None, &train, &held, None, |_| {}).unwrap();
    let mut bits = 0.0;
    let mut bytes = 0;
    for d in &held {
        let p = before.patcher.patch(d).unwrap();
        let mut g = Graph::new(&before.store);
        let out = before.forward(&mut g, d, &p).unwrap();
        let lp = log_softmax_rows(g.value(out.logits));
        bits -= d.iter().enumerate().map(|(i, &b)| lp.get(i, b as usize)).sum::<f64>() / std::f64::consts::LN_2;
        bytes += d.len();
    }
    assert!((r.records[0].bpb_heldout - bits / bytes as f64).abs() < 1e-12);
}

#[test]
fn inconsistent_configs_are_rejected() {
    let (_, _, mut model) = setup();
    let (train, held) = corpus();
    let needs_teacher = TrainConfig { alpha: 0.1, ..cfg(Stage::A, 2) };
    assert!(matches!(run_stage(&mut model, &needs_teacher, None, &train, &held, None, |_| {}), Err(Error::Precondition(_))));
    let a_with_body = TrainConfig { body_mode: Some(BodyMode::AttentionOnly), ..cfg(Stage::A, 2) };
    assert!(run_stage(&mut model, &a_with_body, None, &train, &held, None, |_| {}).is_err());
    let b_nothing = TrainConfig { body_mode: Some(BodyMode::AllFrozen), ..cfg(Stage::B, 2) };
    assert!(run_stage(&mut model, &b_nothing, None, &train, &held, None, |_| {}).is_err());
    let s_without_alpha = TrainConfig { align_layers: Some(vec![0]), ..cfg(Stage::A, 2) };
    assert!(run_stage(&mut model, &s_without_alpha, None, &train, &held, None, |_| {}).is_err());
    let past_end = TrainConfig { stop_after: Some(9), ..cfg(Stage::A, 2) };
    assert!(run_stage(&mut model, &past_end, None, &train, &held, None, |_| {}).is_err());
}

#[test]
fn tampered_frozen_group_is_detected() {
    let (_, _, model) = setup();
    let before = model.store.group_hashes();
    let mut store = model.store.clone();
    store.set_all_trainable(false);
    let id = store.iter().find(|(_, p)| p.group == "body.layers.0.mlp").unwrap().0;
    store.value_mut(id).data_mut()[0] += 1e-9;
    let after = store.group_hashes();
    assert!(verify_frozen(&store, &before, &after).is_err());
    store.set_group_trainable("body.layers.0.mlp", true).unwrap();
    assert!(verify_frozen(&store, &before, &after).is_ok());
}
