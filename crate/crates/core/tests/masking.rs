mod common;

use bytepatch_core::model::{ByteModel, Patcher};
use bytepatch_core::rng::seeded;
use bytepatch_core::{Graph, Tensor};
use common::{max_row_diff, random_bytes, random_patching, tiny_config};
use rand::Rng;

fn logits(model: &ByteModel, x: &[u8], p: &bytepatch_core::patching::Patching, input: Option<&Tensor>) -> (Tensor, Tensor) {
    let mut g = Graph::new(&model.store);
    let out = match input {
        Some(t) => {
            let v = g.constant(t.clone());
            model.forward_from_body_input(&mut g, x, p, v).unwrap()
        }
        None => model.forward(&mut g, x, p).unwrap(),
    };
    (g.value(out.logits).clone(), g.value(out.body_input).clone())
}

#[test]
fn patch_logits_never_see_later_patches_or_their_own_body_output() {
    let mut rng = seeded(11);
    let mut controls = 0;
    for trial in 0..50u64 {
        let model = ByteModel::new(tiny_config(), trial, None, Patcher::fixed(3)).unwrap();
        let n = rng.random_range(6..24);
        let x = random_bytes(n, &mut rng);
        let p = random_patching(n, &mut rng);
        let ranges = p.ranges();
        let j = rng.random_range(0..p.m());
        let (a, b) = ranges[j];
        let (base, input) = logits(&model, &x, &p, None);

        if j + 1 < p.m() {
            let mut y = x.clone();
            for byte in &mut y[ranges[j + 1].0..] {
                *byte = byte.wrapping_add(rng.random_range(1..=255));
            }
            let (l, _) = logits(&model, &y, &p, None);
            assert!(max_row_diff(&base, &l, a..b) < 1e-12, "trial {trial}: later bytes leaked");
        }

        let mut moved = input.clone();
        for r in j..p.m() {
            for v in moved.row_mut(r) {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let (l, _) = logits(&model, &x, &p, Some(&moved));
        assert!(max_row_diff(&base, &l, a..b) < 1e-12, "trial {trial}: body input at >= {j} leaked");

        if j > 0 {
            let mut prev = input.clone();
            for v in prev.row_mut(j - 1) {
                *v += rng.random_range(-1.0..1.0);
            }
            let (l, _) = logits(&model, &x, &p, Some(&prev));
            assert!(max_row_diff(&base, &l, a..b) > 1e-9, "trial {trial}: patch {j} ignores patch {}", j - 1);
            controls += 1;
        }
    }
    assert!(controls > 10);
}

#[test]
fn byte_logits_are_causal() {
    let model = ByteModel::new(tiny_config(), 4, None, Patcher::fixed(3)).unwrap();
    let mut rng = seeded(5);
    let x = random_bytes(17, &mut rng);
    let p = random_patching(17, &mut rng);
    let (base, _) = logits(&model, &x, &p, None);
    for i in [0usize, 4, 9, 16] {
        let mut y = x.clone();
        y[i] ^= 0x21;
        let (l, _) = logits(&model, &y, &p, None);
        assert!(max_row_diff(&base, &l, 0..i + 1) < 1e-12, "byte {i} reached rows <= {i}");
        if i + 1 < 17 {
            assert!(max_row_diff(&base, &l, i + 1..17) > 0.0);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let model = ByteModel::new(tiny_config(), 8, None, Patcher::fixed(2)).unwrap();
    use bytepatch_core::entropy_lm::ByteLm;
    let lp = model.log_probs(b"distribution check").unwrap();
    for i in 0..lp.rows() {
        let s: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
