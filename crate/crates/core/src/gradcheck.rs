//! Analytic gradients against central finite differences, per component
//! and per parameter group.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::BodyConfig;
use crate::entropy_lm::EntropyLmConfig;
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::model::{ByteModel, LocalConfig, ModelConfig, Patcher, PatchingConfig, StrategyKind};
use crate::nn::Linear;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::patching::{segment_fixed, Patching};
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::train::alignment_term;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Linear,
    EncoderPooling,
    Projections,
    BodyAttention,
    DecoderCross,
    Alignment,
    FullStack,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Linear,
        Component::EncoderPooling,
        Component::Projections,
        Component::BodyAttention,
        Component::DecoderCross,
        Component::Alignment,
        Component::FullStack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Linear => "linear",
            Component::EncoderPooling => "encoder_pooling",
            Component::Projections => "projections",
            Component::BodyAttention => "body_attention",
            Component::DecoderCross => "decoder_cross",
            Component::Alignment => "alignment",
            Component::FullStack => "full_stack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| invalid!("unknown gradcheck component {s}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub input_bytes: usize,
    pub groups: Vec<GroupCheck>,
    /// Frozen groups; none of them received a gradient.
    pub frozen_groups: Vec<String>,
    /// Frozen groups that nevertheless received a gradient.
    pub frozen_with_gradient: Vec<String>,
    /// Trainable groups that no gradient reached (stop-gradient targets).
    pub trainable_without_gradient: Vec<String>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-5;

/// Entries sampled per tensor; small tensors are checked in full.
const MAX_ENTRIES: usize = 24;

pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        local: LocalConfig { width: 8, encoder_layers: 1, decoder_layers: 1, heads: 2, mlp_width: 16, pool_heads: 2, rope_base: 10_000.0 },
        body: BodyConfig { layers: 2, width: 12, heads: 2, mlp_width: 16, rope_base: 100.0 },
        patching: PatchingConfig { strategy: StrategyKind::Fixed, stride: 3, max_patch_len: 0, ..Default::default() },
        entropy_lm: EntropyLmConfig { layers: 1, width: 8, heads: 2, mlp_width: 16, context: 16, rope_base: 10_000.0 },
        projection_norm: true,
    }
}

/// Compares analytic and numeric gradients of `loss` for every trainable
/// parameter of `store`. `numeric` builds the loss used for differencing
/// and may differ from `analytic` only by stop-gradient placement.
fn compare(
    store: &mut ParamStore,
    analytic: &dyn Fn(&mut Graph<'_>) -> Result<Var>,
    numeric: &dyn Fn(&mut Graph<'_>) -> Result<Var>,
    seed: u64,
) -> Result<Checked> {
    let grads: Gradients = {
        let mut g = Graph::new(store);
        let l = analytic(&mut g)?;
        g.backward(l)
    };
    let mut rng = seeded(seed);
    let mut groups: Vec<GroupCheck> = Vec::new();
    let mut frozen = Vec::new();
    let mut leaked = Vec::new();
    let mut unreached = Vec::new();
    for group in store.groups() {
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
        if !ids.iter().all(|&id| store.is_trainable(id)) {
            if ids.iter().any(|&id| grads.get(id).is_some()) {
                leaked.push(group.clone());
            }
            frozen.push(group);
            continue;
        }
        if ids.iter().all(|&id| grads.get(id).is_none()) {
            unreached.push(group.clone());
        }
        let mut check = GroupCheck { group, entries_checked: 0, max_rel_error: 0.0 };
        for id in ids {
            let len = store.value(id).len();
            let entries: Vec<usize> = if len <= MAX_ENTRIES { (0..len).collect() } else { (0..MAX_ENTRIES).map(|_| rng.random_range(0..len)).collect() };
            for e in entries {
                let orig = store.value(id).data()[e];
                store.value_mut(id).data_mut()[e] = orig + STEP;
                let lp = eval(store, numeric)?;
                store.value_mut(id).data_mut()[e] = orig - STEP;
                let lm = eval(store, numeric)?;
                store.value_mut(id).data_mut()[e] = orig;
                let num = (lp - lm) / (2.0 * STEP);
                let ana = grads.get(id).map_or(0.0, |t| t.data()[e]);
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(REL_FLOOR);
                check.max_rel_error = check.max_rel_error.max(err);
                check.entries_checked += 1;
            }
        }
        groups.push(check);
    }
    Ok(Checked { groups, frozen, leaked, unreached })
}

struct Checked {
    groups: Vec<GroupCheck>,
    frozen: Vec<String>,
    leaked: Vec<String>,
    unreached: Vec<String>,
}

fn eval(store: &ParamStore, f: &dyn Fn(&mut Graph<'_>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(store);
    let l = f(&mut g)?;
    Ok(g.value(l).item())
}

fn fixed_input() -> (Vec<u8>, Patching) {
    let x = b"ab cdefg".to_vec();
    let p = segment_fixed(x.len(), 3).expect("valid stride");
    (x, p)
}

/// Runs the check for one component on an 8-byte input.
pub fn gradcheck(component: Component, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let (x, patching) = fixed_input();
    let mut rng = seeded(seed ^ 0x6772_6164);
    let checked = if component == Component::Linear {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "linear", "linear", 5, 4, true, 0.5, &mut rng);
        let input = Tensor::randn(3, 5, 1.0, &mut rng);
        let target = Tensor::randn(3, 4, 1.0, &mut rng);
        let f = |g: &mut Graph<'_>| -> Result<Var> {
            let xi = g.constant(input.clone());
            let y = lin.forward(g, xi);
            Ok(g.mse(y, target.clone()))
        };
        compare(&mut store, &f, &f, seed)?
    } else {
        let cfg = gradcheck_config();
        let mut model = ByteModel::new(cfg, seed, None, Patcher::fixed(3))?;
        for t in model.store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
            let (r, c) = model.store.value(t).shape();
            let noise = Tensor::randn(r, c, 0.3, &mut rng);
            model.store.value_mut(t).add_assign(&noise);
        }
        let trainable: &dyn Fn(&str) -> bool = match component {
            Component::EncoderPooling => &|g| g == "adapter.encoder" || g == "adapter.byte_embedding",
            Component::Projections => &|g| g == "adapter.enc_proj" || g == "adapter.dec_proj",
            Component::BodyAttention => &|g| g.starts_with("body."),
            Component::DecoderCross => &|g| g == "adapter.decoder" || g == "adapter.byte_embedding",
            Component::Alignment => &|g| g.starts_with("adapter.") || g == "teacher.proxy",
            Component::FullStack | Component::Linear => &|g| g.starts_with("adapter.") || g.starts_with("body."),
        };
        let m = patching.m();
        let (dl, db) = (cfg.local.width, cfg.body.width);
        let mut proxy = None;
        if component == Component::Alignment {
            proxy = Some(model.store.add("teacher.proxy", "teacher.proxy", Tensor::randn(db, x.len(), 1.0, &mut rng), false));
        }
        model.store.set_all_trainable(false);
        model.store.set_trainable_where(true, trainable);

        let weights_p = Tensor::randn(m, dl, 1.0, &mut rng);
        let p_const = Tensor::randn(m, dl, 1.0, &mut rng);
        let weights_dec = Tensor::randn(m, dl, 1.0, &mut rng);
        let body_in = Tensor::randn(m, db, 1.0, &mut rng);
        let weights_body = Tensor::randn(m, db, 1.0, &mut rng);
        let ctx = Tensor::randn(m, dl, 1.0, &mut rng);
        let mut pool = Tensor::zeros(m, x.len());
        for (j, (a, b)) in patching.ranges().into_iter().enumerate() {
            for i in a..b {
                pool.set(j, i, 1.0 / (b - a) as f64);
            }
        }
        let model = &model;
        let analytic = |g: &mut Graph<'_>, teacher_fixed: Option<&Tensor>| -> Result<Var> {
            match component {
                Component::EncoderPooling => {
                    let h = model.encoder.encode_bytes(g, &model.embedding, &x)?;
                    let p = model.encoder.pool_patches(g, h, &patching)?;
                    Ok(g.weighted_sum(p, weights_p.clone()))
                }
                Component::Projections => {
                    let p = g.constant(p_const.clone());
                    let t = model.enc_proj.project_to_body(g, p)?;
                    let y = model.dec_proj.project_from_body(g, t)?;
                    Ok(g.weighted_sum(y, weights_dec.clone()))
                }
                Component::BodyAttention => {
                    let xi = g.constant(body_in.clone());
                    let out = model.body.forward(g, xi, &[2, 5, 11])?;
                    Ok(g.weighted_sum(out.hidden, weights_body.clone()))
                }
                Component::DecoderCross => {
                    let c = g.constant(ctx.clone());
                    let logits = model.decoder.decode_logits(g, &model.embedding, &x, c, &patching)?;
                    let ids: Vec<usize> = x.iter().map(|&b| b as usize).collect();
                    Ok(g.cross_entropy(logits, &ids))
                }
                Component::Alignment => {
                    let out = model.forward(g, &x, &patching)?;
                    let teacher = match teacher_fixed {
                        Some(t) => g.constant(t.clone()),
                        None => {
                            let pc = g.constant(pool.clone());
                            let pv = g.param(proxy.expect("proxy registered"));
                            g.linear(pc, pv, None)
                        }
                    };
                    let student = [out.body.layer_states[cfg.body.layers - 1]];
                    Ok(alignment_term(g, &student, &[teacher], 0.5)?.expect("alpha is positive"))
                }
                Component::FullStack | Component::Linear => {
                    let out = model.forward(g, &x, &patching)?;
                    let ids: Vec<usize> = x.iter().map(|&b| b as usize).collect();
                    Ok(g.cross_entropy(out.logits, &ids))
                }
            }
        };
        let fixed_teacher = proxy.map(|pv| pool.matmul_t(model.store.value(pv)));
        let mut store = model.store.clone();
        let a = |g: &mut Graph<'_>| analytic(g, None);
        let n = |g: &mut Graph<'_>| analytic(g, fixed_teacher.as_ref());
        compare(&mut store, &a, &n, seed)?
    };
    let Checked { groups, frozen, leaked, unreached } = checked;
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let passed = max_rel_error < tolerance && leaked.is_empty() && !groups.is_empty();
    Ok(GradcheckReport {
        component,
        input_bytes: x.len(),
        groups,
        frozen_groups: frozen,
        frozen_with_gradient: leaked,
        trainable_without_gradient: unreached,
        max_rel_error,
        tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact_to_roundoff() {
        let r = gradcheck(Component::Linear, 1e-7, 1).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(Component::parse(c.name()).unwrap(), c);
        }
        assert!(Component::parse("nope").is_err());
    }
}
