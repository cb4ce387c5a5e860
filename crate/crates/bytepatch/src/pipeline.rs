//! The stages of the pipeline as library calls, each reading and writing
//! artifacts under the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};

use bytepatch_core::bpe::{train_bpe, BpeVocab};
use bytepatch_core::entropy_lm::{train_entropy_lm, EntropyLm};
use bytepatch_core::eval::{eval_suite, score_mc, BytePath, EvalReport, McScore, Scorer, Task, TokenPath};
use bytepatch_core::gradcheck::{gradcheck, Component, GradcheckReport};
use bytepatch_core::model::{build_patcher, ByteModel, Patcher, SampleMode, StrategyKind};
use bytepatch_core::params::{hex_digest, ParamPartition};
use bytepatch_core::patching::{patch_stats, PatchStats, Patching};
use bytepatch_core::teacher::{pretrain_body, TokenLm};
use bytepatch_core::train::{apply_stage_partition, run_stage, MetricsRecord, Stage, Teacher};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_byte_model, load_entropy_lm, load_token_lm, save_byte_model, save_entropy_lm, save_token_lm};
use crate::config::{CorpusChoice, Paths, PipelineConfig};
use crate::corpus::{ingest, Corpus};
use crate::error::{io_err, Error, Result};
use crate::metrics::MetricsLog;
use crate::tasks::load_task;
use crate::vocab_io::{load_vocab, save_vocab};

/// A configured pipeline rooted at `cfg.out_dir`.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub paths: Paths,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub documents: usize,
    pub train_chunks: usize,
    pub val_chunks: usize,
    pub train_bytes: usize,
    pub val_bytes: usize,
    pub dropped_invalid_utf8: usize,
    pub skipped_empty: usize,
}

impl CorpusSummary {
    fn of(c: &Corpus) -> Self {
        Self {
            documents: c.documents,
            train_chunks: c.train.len(),
            val_chunks: c.val.len(),
            train_bytes: c.train.iter().map(Vec::len).sum(),
            val_bytes: c.val.iter().map(Vec::len).sum(),
            dropped_invalid_utf8: c.dropped_invalid_utf8,
            skipped_empty: c.skipped_empty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeSummary {
    pub path: PathBuf,
    pub size: usize,
    pub merges: usize,
    /// Tokens per byte on the validation split.
    pub val_tokens_per_byte: f64,
    pub corpus: CorpusSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub metrics: PathBuf,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub corpus: CorpusSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHash {
    pub group: String,
    pub before: String,
    pub after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub path: PathBuf,
    pub metrics: PathBuf,
    pub step: u64,
    pub threshold: Option<f64>,
    pub initial_bpb: Option<f64>,
    pub final_bpb: Option<f64>,
    pub best_bpb: Option<f64>,
    pub trainable_groups: Vec<String>,
    pub changed_groups: Vec<String>,
    pub hashes: Vec<GroupHash>,
    pub corpus: CorpusSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStatsReport {
    pub strategy: String,
    pub files: Vec<PathBuf>,
    /// Total bytes.
    pub n: usize,
    /// Total patches.
    pub m: usize,
    pub mean_patch_size: f64,
    pub histogram: std::collections::BTreeMap<usize, usize>,
    pub patches_per_byte: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt_hex: String,
    pub output_hex: String,
    /// Generated bytes only, lossily decoded.
    pub continuation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub task: String,
    pub item: usize,
    pub score: McScore,
}

/// Which trained model to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    StageA,
    StageB,
    Teacher,
}

impl ModelChoice {
    pub fn tag(self) -> &'static str {
        match self {
            ModelChoice::StageA => "stage_a",
            ModelChoice::StageB => "stage_b",
            ModelChoice::Teacher => "teacher",
        }
    }
}

/// A loaded model on its scoring path.
pub enum LoadedScorer {
    Byte(Box<ByteModel>),
    Token { lm: Box<TokenLm>, vocab: BpeVocab },
}

impl LoadedScorer {
    pub fn scorer(&self) -> Box<dyn Scorer + '_> {
        match self {
            LoadedScorer::Byte(m) => Box::new(BytePath(&**m)),
            LoadedScorer::Token { lm, vocab } => Box::new(TokenPath { lm, vocab }),
        }
    }
}

/// Strategy overrides for `patch-stats`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PatchOverrides {
    pub strategy: Option<StrategyKind>,
    pub k: Option<usize>,
    pub threshold: Option<f64>,
    pub max_len: Option<usize>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn require(path: &Path, what: &'static str, produced_by: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { what, path: path.to_path_buf(), produced_by })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { context: path.display().to_string(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let paths = cfg.paths();
        Self { cfg, paths, verbose: false }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn corpus(&self, which: CorpusChoice) -> Result<Corpus> {
        let spec = match which {
            CorpusChoice::A => &self.cfg.corpus_a,
            CorpusChoice::B => &self.cfg.corpus_b,
        };
        let c = ingest(spec)?;
        if c.dropped_invalid_utf8 > 0 || c.skipped_empty > 0 {
            self.log(format!(
                "warning: corpus {which:?}: dropped {} documents with invalid UTF-8, skipped {} empty",
                c.dropped_invalid_utf8, c.skipped_empty
            ));
        }
        Ok(c)
    }

    fn vocab(&self) -> Result<BpeVocab> {
        require(&self.paths.vocab, "BPE vocabulary", "bytepatch train-bpe")?;
        load_vocab(&self.paths.vocab)
    }

    fn teacher(&self) -> Result<TokenLm> {
        require(&self.paths.teacher, "stage 0 body checkpoint", "bytepatch pretrain-body")?;
        load_token_lm(&self.paths.teacher)
    }

    fn entropy_lm(&self) -> Result<EntropyLm> {
        require(&self.paths.entropy, "entropy model checkpoint", "bytepatch train-entropy-lm")?;
        load_entropy_lm(&self.paths.entropy)
    }

    pub fn train_bpe(&self) -> Result<BpeSummary> {
        let c = self.corpus(CorpusChoice::A)?;
        let vocab = train_bpe(c.train.iter().map(Vec::as_slice), self.cfg.bpe.target_size)?;
        save_vocab(&self.paths.vocab, &vocab)?;
        let val_bytes: usize = c.val.iter().map(Vec::len).sum();
        let val_tokens: usize = c.val.iter().map(|d| vocab.encode(d).len()).sum();
        Ok(BpeSummary {
            path: self.paths.vocab.clone(),
            size: vocab.size(),
            merges: vocab.merges().len(),
            val_tokens_per_byte: val_tokens as f64 / val_bytes.max(1) as f64,
            corpus: CorpusSummary::of(&c),
        })
    }

    pub fn pretrain_body(&self) -> Result<PretrainSummary> {
        let vocab = self.vocab()?;
        let c = self.corpus(CorpusChoice::A)?;
        let metrics = self.paths.metrics("stage0");
        let mut log = MetricsLog::create(&metrics)?;
        let mut records = Vec::new();
        let mut err = None;
        let lm = pretrain_body(&vocab, self.cfg.model.body, &c.train, &c.val, &self.cfg.stage0, |r| {
            self.log(format!("stage0 step {} train {:?} heldout {:.4}", r.step, r.train_loss, r.heldout_loss));
            if let Err(e) = log.write(r) {
                err.get_or_insert(e);
            }
            records.push(*r);
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        save_token_lm(&self.paths.teacher, &lm)?;
        Ok(PretrainSummary {
            path: self.paths.teacher.clone(),
            metrics,
            initial_heldout_loss: records.first().map_or(f64::NAN, |r| r.heldout_loss),
            final_heldout_loss: records.last().map_or(f64::NAN, |r| r.heldout_loss),
            corpus: CorpusSummary::of(&c),
        })
    }

    pub fn train_entropy_lm(&self) -> Result<PretrainSummary> {
        let c = self.corpus(CorpusChoice::A)?;
        let metrics = self.paths.metrics("entropy");
        let mut log = MetricsLog::create(&metrics)?;
        let mut records = Vec::new();
        let mut err = None;
        let lm = train_entropy_lm(self.cfg.model.entropy_lm, &c.train, &c.val, &self.cfg.entropy, |r| {
            self.log(format!("entropy step {} train {:?} heldout {:.4}", r.step, r.train_loss, r.heldout_loss));
            if let Err(e) = log.write(r) {
                err.get_or_insert(e);
            }
            records.push(*r);
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        save_entropy_lm(&self.paths.entropy, &lm)?;
        Ok(PretrainSummary {
            path: self.paths.entropy.clone(),
            metrics,
            initial_heldout_loss: records.first().map_or(f64::NAN, |r| r.heldout_loss),
            final_heldout_loss: records.last().map_or(f64::NAN, |r| r.heldout_loss),
            corpus: CorpusSummary::of(&c),
        })
    }

    /// A fresh Stage A model: body from the teacher, patcher built and
    /// calibrated on the Stage A training split.
    pub fn initial_model(&self, teacher: &TokenLm, train: &[Vec<u8>]) -> Result<ByteModel> {
        let pcfg = &self.cfg.model.patching;
        let lm = match pcfg.strategy {
            StrategyKind::Entropy => Some(self.entropy_lm()?),
            _ => None,
        };
        let calib = train.iter().take(self.cfg.calibration_chunks.max(1)).map(Vec::as_slice);
        let patcher = build_patcher(pcfg, lm, calib)?;
        Ok(ByteModel::new(self.cfg.model, self.cfg.seed, Some(teacher), patcher)?)
    }

    /// Runs one adaptation stage. With `resume`, continues from the
    /// optimizer state saved in this stage's checkpoint.
    pub fn train_stage(&self, stage: Stage, resume: bool) -> Result<StageSummary> {
        let tcfg = self.cfg.train_config(stage);
        let out = self.paths.checkpoint(stage).to_path_buf();
        let needs_teacher = tcfg.alpha > 0.0;
        let (mut model, state, corpus) = if resume {
            require(&out, "checkpoint to resume", if stage == Stage::A { "bytepatch train --stage A" } else { "bytepatch train --stage B" })?;
            let loaded = load_byte_model(&out)?;
            if loaded.stage != Some(stage) {
                return Err(Error::Config(format!("{} holds a stage {:?} model, not stage {stage}", out.display(), loaded.stage)));
            }
            let state = loaded.state.ok_or_else(|| Error::Config(format!("{} carries no optimizer state", out.display())))?;
            let which = if stage == Stage::A { CorpusChoice::A } else { CorpusChoice::B };
            (loaded.model, Some(state), self.corpus(which)?)
        } else {
            match stage {
                Stage::A => {
                    let teacher = self.teacher()?;
                    let c = self.corpus(CorpusChoice::A)?;
                    (self.initial_model(&teacher, &c.train)?, None, c)
                }
                Stage::B => {
                    require(&self.paths.stage_a, "stage A checkpoint", "bytepatch train --stage A")?;
                    let loaded = load_byte_model(&self.paths.stage_a)?;
                    if loaded.stage != Some(Stage::A) {
                        return Err(Error::Config(format!("{} is not a stage A checkpoint", self.paths.stage_a.display())));
                    }
                    (loaded.model, None, self.corpus(CorpusChoice::B)?)
                }
            }
        };
        let (teacher_lm, vocab) = if needs_teacher { (Some(self.teacher()?), Some(self.vocab()?)) } else { (None, None) };
        let teacher = match (&teacher_lm, &vocab) {
            (Some(lm), Some(vocab)) => Some(Teacher { lm, vocab }),
            _ => None,
        };

        let metrics = self.paths.metrics(&format!("stage_{}", stage.to_string().to_lowercase()));
        let mut log = if resume { MetricsLog::append(&metrics)? } else { MetricsLog::create(&metrics)? };
        let mut err = None;
        let report = run_stage(&mut model, tcfg, teacher, &corpus.train, &corpus.val, state, |r: &MetricsRecord| {
            self.log(format!(
                "stage {stage} step {} ce {:?} align {:?} bpb {:.4} patch {:.2}",
                r.step, r.ce_nats_per_byte, r.align_loss, r.bpb_heldout, r.mean_patch_size
            ));
            if let Err(e) = log.write(r) {
                err.get_or_insert(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        save_byte_model(&out, &model, Some(stage), Some(&report.state))?;

        let bpbs: Vec<f64> = report.records.iter().map(|r| r.bpb_heldout).collect();
        let hashes = report
            .hashes_before
            .iter()
            .zip(&report.hashes_after)
            .map(|(a, b)| GroupHash { group: a.0.clone(), before: hex_digest(&a.1), after: hex_digest(&b.1) })
            .collect();
        let summary = StageSummary {
            stage,
            path: out,
            metrics,
            step: report.state.step,
            threshold: match model.patcher.strategy() {
                bytepatch_core::patching::Strategy::Entropy { threshold } => Some(threshold),
                _ => None,
            },
            initial_bpb: bpbs.first().copied(),
            final_bpb: bpbs.last().copied(),
            best_bpb: bpbs.iter().copied().reduce(f64::min),
            trainable_groups: report.trainable_groups.clone(),
            changed_groups: report.changed_groups().into_iter().map(String::from).collect(),
            hashes,
            corpus: CorpusSummary::of(&corpus),
        };
        write_json(&self.paths.checkpoint(stage).with_extension("report.json"), &summary)?;
        Ok(summary)
    }

    pub fn checkpoint_path(&self, choice: ModelChoice) -> &Path {
        match choice {
            ModelChoice::StageA => &self.paths.stage_a,
            ModelChoice::StageB => &self.paths.stage_b,
            ModelChoice::Teacher => &self.paths.teacher,
        }
    }

    /// Loads a model; `checkpoint` overrides the configured location.
    pub fn load_scorer(&self, choice: ModelChoice, checkpoint: Option<&Path>) -> Result<LoadedScorer> {
        let path = checkpoint.unwrap_or_else(|| self.checkpoint_path(choice));
        match choice {
            ModelChoice::Teacher => {
                require(path, "stage 0 body checkpoint", "bytepatch pretrain-body")?;
                Ok(LoadedScorer::Token { lm: Box::new(load_token_lm(path)?), vocab: self.vocab()? })
            }
            ModelChoice::StageA => {
                require(path, "stage A checkpoint", "bytepatch train --stage A")?;
                Ok(LoadedScorer::Byte(Box::new(load_byte_model(path)?.model)))
            }
            ModelChoice::StageB => {
                require(path, "stage B checkpoint", "bytepatch train --stage B")?;
                Ok(LoadedScorer::Byte(Box::new(load_byte_model(path)?.model)))
            }
        }
    }

    fn tasks(&self, extra: &[PathBuf]) -> Result<Vec<Task>> {
        self.cfg.eval.tasks.iter().chain(extra).map(|p| load_task(p)).collect()
    }

    fn heldout(&self) -> Result<Vec<Vec<u8>>> {
        let mut val = self.corpus(self.cfg.eval.corpus)?.val;
        if self.cfg.eval.max_heldout_chunks > 0 {
            val.truncate(self.cfg.eval.max_heldout_chunks);
        }
        Ok(val)
    }

    /// Held-out BPB and task accuracy; the report is also written next to
    /// the checkpoints.
    pub fn eval(&self, choice: ModelChoice, checkpoint: Option<&Path>, extra_tasks: &[PathBuf]) -> Result<EvalReport> {
        let loaded = self.load_scorer(choice, checkpoint)?;
        let tasks = self.tasks(extra_tasks)?;
        let heldout = self.heldout()?;
        let mean_patch = match &loaded {
            LoadedScorer::Byte(m) => {
                let ps = heldout.iter().filter(|d| !d.is_empty()).map(|d| m.patcher.patch(d)).collect::<bytepatch_core::Result<Vec<Patching>>>()?;
                Some(patch_stats(ps.iter())?.mean_patch_size)
            }
            LoadedScorer::Token { .. } => None,
        };
        let report = eval_suite(&*loaded.scorer(), &tasks, &heldout, choice.tag(), &self.cfg.hash(), mean_patch)?;
        write_json(&self.cfg.out_dir.join(format!("eval_{}.json", choice.tag())), &report)?;
        Ok(report)
    }

    pub fn score_mc(&self, choice: ModelChoice, checkpoint: Option<&Path>, task_files: &[PathBuf]) -> Result<Vec<ItemScores>> {
        let loaded = self.load_scorer(choice, checkpoint)?;
        let scorer = loaded.scorer();
        let mut out = Vec::new();
        for t in self.tasks(task_files)? {
            for (i, item) in t.items.iter().enumerate() {
                out.push(ItemScores { task: t.name.clone(), item: i, score: score_mc(&*scorer, item)? });
            }
        }
        Ok(out)
    }

    pub fn generate(&self, choice: ModelChoice, checkpoint: Option<&Path>, prompt: &[u8], max_bytes: usize, mode: SampleMode) -> Result<Generation> {
        let path = checkpoint.unwrap_or_else(|| self.checkpoint_path(choice));
        if choice == ModelChoice::Teacher {
            return Err(Error::Config("generation runs on the byte models; choose stage-a or stage-b".into()));
        }
        require(path, "byte model checkpoint", "bytepatch train")?;
        let model = load_byte_model(path)?.model;
        let out = model.generate(prompt, max_bytes, mode)?;
        Ok(Generation {
            prompt_hex: hex(prompt),
            output_hex: hex(&out),
            continuation: String::from_utf8_lossy(&out[prompt.len()..]).into_owned(),
        })
    }

    pub fn patch_stats(&self, files: &[PathBuf], o: PatchOverrides) -> Result<PatchStatsReport> {
        if files.is_empty() {
            return Err(Error::Config("patch-stats needs at least one input file".into()));
        }
        let mut pcfg = self.cfg.model.patching;
        if let Some(s) = o.strategy {
            pcfg.strategy = s;
        }
        if let Some(k) = o.k {
            pcfg.stride = k;
        }
        if o.threshold.is_some() {
            pcfg.threshold = o.threshold;
        }
        if let Some(c) = o.max_len {
            pcfg.max_patch_len = c;
        }
        pcfg.validate()?;
        let mut docs = Vec::new();
        for f in files {
            let bytes = fs::read(f).map_err(io_err(f))?;
            if !bytes.is_empty() {
                docs.push(bytes);
            }
        }
        let patcher: Patcher = match pcfg.strategy {
            StrategyKind::Entropy => build_patcher(&pcfg, Some(self.entropy_lm()?), docs.iter().map(Vec::as_slice))?,
            _ => build_patcher(&pcfg, None, std::iter::empty())?,
        };
        let patchings = docs.iter().map(|d| patcher.patch(d)).collect::<bytepatch_core::Result<Vec<_>>>()?;
        let s: PatchStats = patch_stats(patchings.iter())?;
        let strategy = match patcher.kind {
            bytepatch_core::model::PatcherKind::Entropy { threshold, .. } => format!("entropy(threshold={threshold})"),
            bytepatch_core::model::PatcherKind::Fixed { k } => format!("fixed(k={k})"),
            bytepatch_core::model::PatcherKind::Whitespace => "whitespace".into(),
        };
        Ok(PatchStatsReport {
            strategy,
            files: files.to_vec(),
            n: s.total_bytes,
            m: s.total_patches,
            mean_patch_size: s.mean_patch_size,
            histogram: s.histogram,
            patches_per_byte: s.patches_per_byte,
        })
    }

    /// Trainable flags per group for the given stage, read from a
    /// checkpoint when one is given, else from a fresh model.
    pub fn partition_report(&self, stage: Stage, checkpoint: Option<&Path>) -> Result<ParamPartition> {
        let mut model = match checkpoint {
            Some(p) => load_byte_model(p)?.model,
            None => ByteModel::new(self.cfg.model, self.cfg.seed, None, Patcher::fixed(self.cfg.model.patching.stride))?,
        };
        apply_stage_partition(&mut model, self.cfg.train_config(stage))?;
        Ok(model.store.partition())
    }
}

/// Runs the gradient check for the named components.
pub fn gradcheck_components(components: &[Component], tolerance: f64, seed: u64) -> Result<Vec<GradcheckReport>> {
    Ok(components.iter().map(|&c| gradcheck(c, tolerance, seed)).collect::<bytepatch_core::Result<_>>()?)
}

