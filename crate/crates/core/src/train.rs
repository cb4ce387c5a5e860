//! Stage A (adapter only, body frozen) and Stage B (attention-only body
//! updates, adapter frozen) training.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::BodyMode;
use crate::bpe::BpeVocab;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ByteModel;
use crate::nn::log_softmax_rows;
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Gradients, ParamStore};
use crate::patching::{patch_stats, Patching};
use crate::rng::{seeded, ModelRng};
use crate::teacher::TokenLm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

impl core::fmt::Display for Stage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Stage::A => "A",
            Stage::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight of the hidden-state alignment term.
    pub alpha: f64,
    /// Body layers aligned to the teacher. Unset means the last layer when
    /// `alpha > 0`.
    pub align_layers: Option<Vec<usize>>,
    pub steps: u64,
    /// Documents per step.
    pub batch_size: usize,
    /// Bytes per training chunk.
    pub seq_cap: usize,
    pub seed: u64,
    pub eval_interval: u64,
    /// Held-out chunks scored at each eval; 0 means all.
    pub eval_docs: usize,
    /// Body groups trained; unset means all frozen in Stage A and
    /// attention-only in Stage B.
    pub body_mode: Option<BodyMode>,
    pub train_final_norm: bool,
    /// Ends this run at the given step; the schedule still spans `steps`.
    pub stop_after: Option<u64>,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::A,
            alpha: 0.0,
            align_layers: None,
            steps: 300,
            batch_size: 4,
            seq_cap: 1024,
            seed: 0,
            eval_interval: 50,
            eval_docs: 32,
            body_mode: None,
            train_final_norm: false,
            stop_after: None,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn body_mode(&self) -> BodyMode {
        self.body_mode.unwrap_or(match self.stage {
            Stage::A => BodyMode::AllFrozen,
            Stage::B => BodyMode::AttentionOnly,
        })
    }

    /// The alignment set `S`, nonempty exactly when `alpha > 0`.
    pub fn align_layers(&self, body_layers: usize) -> Result<Vec<usize>> {
        let layers = match (&self.align_layers, self.alpha > 0.0) {
            (None, true) => alloc::vec![body_layers - 1],
            (None, false) => Vec::new(),
            (Some(v), true) if v.is_empty() => return Err(invalid!("alpha > 0 needs at least one alignment layer")),
            (Some(v), false) if !v.is_empty() => return Err(invalid!("alignment layers are set but alpha is 0")),
            (Some(v), _) => v.clone(),
        };
        if let Some(&l) = layers.iter().find(|&&l| l >= body_layers) {
            return Err(invalid!("alignment layer {l} out of range for {body_layers} body layers"));
        }
        Ok(layers)
    }

    pub fn validate(&self, body_layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        self.align_layers(body_layers)?;
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(invalid!("batch size and eval interval must be positive"));
        }
        if self.stop_after.is_some_and(|s| s > self.steps) {
            return Err(invalid!("stop_after exceeds the {} scheduled steps", self.steps));
        }
        if self.seq_cap < 2 {
            return Err(invalid!("sequence cap must be at least 2 bytes"));
        }
        let mode = self.body_mode();
        match self.stage {
            Stage::A if mode != BodyMode::AllFrozen || self.train_final_norm => {
                return Err(invalid!("stage A keeps the body frozen; body_mode {mode:?} is inconsistent"));
            }
            Stage::B if mode == BodyMode::AllFrozen && !self.train_final_norm => {
                return Err(invalid!("stage B with a fully frozen body and adapter trains nothing"));
            }
            _ => {}
        }
        self.optim.validate()
    }
}

/// Mean negative log-probability (nats) of `targets` under row-aligned
/// `logits` (`n x 256`).
pub fn loss_byte_ce(logits: &Tensor, targets: &[u8]) -> Result<f64> {
    if logits.rows() != targets.len() || logits.cols() != 256 {
        return Err(shape_err!("{} targets for {}x{} logits", targets.len(), logits.rows(), logits.cols()));
    }
    if targets.is_empty() {
        return Err(Error::Empty("targets"));
    }
    let lp = log_softmax_rows(logits);
    Ok(-targets.iter().enumerate().map(|(i, &b)| lp.get(i, b as usize)).sum::<f64>() / targets.len() as f64)
}

/// Averages token states into patches, each token weighted by the number
/// of bytes it shares with the patch.
pub fn pool_to_patches(states: &Tensor, spans: &[(usize, usize)], patching: &Patching) -> Result<Tensor> {
    if states.rows() != spans.len() {
        return Err(shape_err!("{} token states for {} spans", states.rows(), spans.len()));
    }
    let w = states.cols();
    let ranges = patching.ranges();
    let mut out = Tensor::zeros(ranges.len(), w);
    let mut t0 = 0;
    for (j, &(a, b)) in ranges.iter().enumerate() {
        while t0 < spans.len() && spans[t0].1 <= a {
            t0 += 1;
        }
        let mut total = 0usize;
        let row = out.row_mut(j);
        for (t, &(s, e)) in spans.iter().enumerate().skip(t0) {
            if s >= b {
                break;
            }
            let o = e.min(b).saturating_sub(s.max(a));
            if o == 0 {
                continue;
            }
            total += o;
            for (r, &v) in row.iter_mut().zip(states.row(t)) {
                *r += o as f64 * v;
            }
        }
        if total == 0 {
            return Err(invalid!("patch {j} overlaps no token"));
        }
        for r in row.iter_mut() {
            *r /= total as f64;
        }
    }
    Ok(out)
}

/// Teacher states at `layers`, pooled to the patches of `patching`.
pub fn teacher_pooled_states(teacher: &TokenLm, vocab: &BpeVocab, text: &[u8], patching: &Patching, layers: &[usize]) -> Result<Vec<Tensor>> {
    if patching.n() != text.len() {
        return Err(invalid!("patching covers {} bytes, text has {}", patching.n(), text.len()));
    }
    let enc = vocab.encode(text);
    let states = teacher.layer_states(&enc.ids, layers)?;
    states.iter().map(|s| pool_to_patches(s, &enc.spans, patching)).collect()
}

/// `alpha * sum_l MSE(student_l, teacher_l)` over plain tensors.
pub fn loss_alignment(student: &[Tensor], teacher: &[Tensor], alpha: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(shape_err!("{} student layers vs {} teacher layers", student.len(), teacher.len()));
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.shape() {
            return Err(shape_err!("student {:?} vs teacher {:?}", s.shape(), t.shape()));
        }
        total += s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len().max(1) as f64;
    }
    Ok(alpha * total)
}

/// Graph form of [`loss_alignment`]. Teacher inputs are detached, so no
/// gradient ever reaches them. `None` when `alpha` is 0.
pub fn alignment_term(g: &mut Graph<'_>, student: &[Var], teacher: &[Var], alpha: f64) -> Result<Option<Var>> {
    if student.len() != teacher.len() {
        return Err(shape_err!("{} student layers vs {} teacher layers", student.len(), teacher.len()));
    }
    if alpha == 0.0 || student.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (&s, &t) in student.iter().zip(teacher) {
        if g.value(s).shape() != g.value(t).shape() {
            return Err(shape_err!("student {:?} vs teacher {:?}", g.value(s).shape(), g.value(t).shape()));
        }
        let t = g.detach(t);
        let target = g.value(t).clone();
        let l = g.mse(s, target);
        total = Some(match total {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    Ok(total.map(|v| g.scale(v, alpha)))
}

/// Splits documents into chunks of at most `cap` bytes, dropping empties.
pub fn chunk_documents(docs: &[Vec<u8>], cap: usize) -> Vec<Vec<u8>> {
    docs.iter().flat_map(|d| d.chunks(cap.max(1)).map(<[u8]>::to_vec)).collect()
}

/// The stage's teacher, needed when `alpha > 0`.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub lm: &'a TokenLm,
    pub vocab: &'a BpeVocab,
}

/// One JSON-lines metrics record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training cross-entropy since the previous record.
    pub ce_nats_per_byte: Option<f64>,
    /// Mean weighted alignment term since the previous record.
    pub align_loss: Option<f64>,
    pub bpb_heldout: f64,
    pub mean_patch_size: f64,
}

/// Resumable optimizer and sampling state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub rng: ModelRng,
    pub step: u64,
    /// Loss sums since the last record.
    pub running: RunningLoss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub ce: f64,
    pub align: f64,
    pub items: usize,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub records: Vec<MetricsRecord>,
    pub state: TrainState,
    pub hashes_before: Vec<(String, [u8; 32])>,
    pub hashes_after: Vec<(String, [u8; 32])>,
    pub trainable_groups: Vec<String>,
}

impl StageReport {
    pub fn changed_groups(&self) -> Vec<&str> {
        self.hashes_before
            .iter()
            .zip(&self.hashes_after)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0.as_str())
            .collect()
    }
}

/// Applies the stage's trainable set: the adapter in Stage A, the body
/// groups named by the mode in Stage B.
pub fn apply_stage_partition(model: &mut ByteModel, cfg: &TrainConfig) -> Result<()> {
    let store = &mut model.store;
    store.set_all_trainable(false);
    if cfg.stage == Stage::A {
        store.set_trainable_where(true, |g| g.starts_with("adapter."));
    }
    model.body.partition_parameters(store, cfg.body_mode(), cfg.train_final_norm)?;
    Ok(())
}

struct Evaluator<'a> {
    docs: &'a [Vec<u8>],
    patchings: Vec<Patching>,
}

impl<'a> Evaluator<'a> {
    fn new(model: &ByteModel, docs: &'a [Vec<u8>]) -> Result<Self> {
        let patchings = docs.iter().map(|d| model.patcher.patch(d)).collect::<Result<_>>()?;
        Ok(Self { docs, patchings })
    }

    fn bpb(&self, model: &ByteModel) -> Result<(f64, f64)> {
        let mut nats = 0.0;
        let mut bytes = 0usize;
        for (d, p) in self.docs.iter().zip(&self.patchings) {
            nats -= model.byte_log_probs(d, p)?.iter().sum::<f64>();
            bytes += d.len();
        }
        let stats = patch_stats(self.patchings.iter())?;
        Ok((nats / bytes as f64 / core::f64::consts::LN_2, stats.mean_patch_size))
    }
}

/// Trains `model` for one stage. Frozen groups are checked byte for byte
/// afterwards; any change is an error.
pub fn run_stage(
    model: &mut ByteModel,
    cfg: &TrainConfig,
    teacher: Option<Teacher<'_>>,
    train: &[Vec<u8>],
    heldout: &[Vec<u8>],
    resume: Option<TrainState>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<StageReport> {
    let body_layers = model.config.body.layers;
    cfg.validate(body_layers)?;
    let layers = cfg.align_layers(body_layers)?;
    if !layers.is_empty() && teacher.is_none() {
        return Err(Error::Precondition("alignment loss needs the stage 0 teacher".into()));
    }
    let chunks = chunk_documents(train, cfg.seq_cap);
    if chunks.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut held = chunk_documents(heldout, cfg.seq_cap);
    if cfg.eval_docs > 0 {
        held.truncate(cfg.eval_docs);
    }
    if held.is_empty() {
        return Err(Error::Empty("held-out corpus"));
    }

    apply_stage_partition(model, cfg)?;
    let trainable_groups: Vec<String> = model.store.partition().trainable_groups().into_iter().map(String::from).collect();
    let hashes_before = model.store.group_hashes();

    let mut state = resume.unwrap_or_else(|| TrainState {
        optimizer: AdamW::new(cfg.optim, &model.store),
        rng: seeded(cfg.seed),
        step: 0,
        running: RunningLoss::default(),
    });
    let evaluator = Evaluator::new(model, &held)?;
    let mut cache: Vec<Option<Patching>> = (0..chunks.len()).map(|_| None).collect();
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| {
        on_record(&r);
        records.push(r);
    };

    if state.step == 0 {
        let (bpb, mps) = evaluator.bpb(model)?;
        emit(MetricsRecord { step: 0, ce_nats_per_byte: None, align_loss: None, bpb_heldout: bpb, mean_patch_size: mps }, &mut records);
    }
    let end = cfg.stop_after.unwrap_or(cfg.steps);
    while state.step < end {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| state.rng.random_range(0..chunks.len())).collect();
        for &i in &batch {
            if cache[i].is_none() {
                cache[i] = Some(model.patcher.patch(&chunks[i])?);
            }
        }
        let mut grads = Gradients::for_store(&model.store);
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let x = &chunks[i];
            let p = cache[i].as_ref().expect("patching cached above");
            let targets = match teacher {
                Some(t) if !layers.is_empty() => teacher_pooled_states(t.lm, t.vocab, x, p, &layers)?,
                _ => Vec::new(),
            };
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, x, p)?;
            let ids: Vec<usize> = x.iter().map(|&b| b as usize).collect();
            let ce = g.cross_entropy(out.logits, &ids);
            state.running.ce += g.value(ce).item();
            let student: Vec<Var> = layers.iter().map(|&l| out.body.layer_states[l]).collect();
            let tvars: Vec<Var> = targets.into_iter().map(|t| g.constant(t)).collect();
            let loss = match alignment_term(&mut g, &student, &tvars, cfg.alpha)? {
                Some(a) => {
                    state.running.align += g.value(a).item();
                    g.add(ce, a)
                }
                None => ce,
            };
            state.running.items += 1;
            g.backward_into(loss, scale, &mut grads);
        }
        state.optimizer.step(&mut model.store, &mut grads, cfg.steps);
        state.step += 1;

        if state.step.is_multiple_of(cfg.eval_interval) || state.step == cfg.steps {
            let (bpb, mps) = evaluator.bpb(model)?;
            let r = state.running;
            let n = r.items.max(1) as f64;
            let align = (!layers.is_empty()).then_some(r.align / n);
            emit(
                MetricsRecord { step: state.step, ce_nats_per_byte: Some(r.ce / n), align_loss: align, bpb_heldout: bpb, mean_patch_size: mps },
                &mut records,
            );
            state.running = RunningLoss::default();
        }
    }

    let hashes_after = model.store.group_hashes();
    verify_frozen(&model.store, &hashes_before, &hashes_after)?;
    Ok(StageReport { records, state, hashes_before, hashes_after, trainable_groups })
}

/// Errors if any frozen group's hash moved.
pub fn verify_frozen(store: &ParamStore, before: &[(String, [u8; 32])], after: &[(String, [u8; 32])]) -> Result<()> {
    let partition = store.partition();
    let trainable: BTreeSet<&str> = partition.groups.iter().filter(|g| g.trainable).map(|g| g.name.as_str()).collect();
    for ((name, a), (_, b)) in before.iter().zip(after) {
        if a != b && !trainable.contains(name.as_str()) {
            return Err(Error::Precondition(alloc::format!("frozen group {name} changed during training")));
        }
    }
    Ok(())
}
