//! Pipeline configuration: one TOML file with a section per stage, plus
//! `key.path=value` overrides applied before validation.

use std::fs;
use std::path::{Path, PathBuf};

use bytepatch_core::entropy_lm::EntropyTrainConfig;
use bytepatch_core::model::ModelConfig;
use bytepatch_core::teacher::Stage0Config;
use bytepatch_core::train::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusChoice {
    #[serde(rename = "a")]
    A,
    #[default]
    #[serde(rename = "b")]
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeSection {
    pub target_size: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        Self { target_size: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tasks: Vec<PathBuf>,
    /// Corpus whose validation split is scored for BPB.
    pub corpus: CorpusChoice,
    /// Validation chunks scored; 0 means all.
    pub max_heldout_chunks: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: Vec::new(), corpus: CorpusChoice::B, max_heldout_chunks: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub prompt: String,
    pub max_bytes: usize,
    /// 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { prompt: String::new(), max_bytes: 64, temperature: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Adapter initialization seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stage A, Stage 0 and entropy model corpus.
    pub corpus_a: CorpusSpec,
    /// Stage B corpus.
    pub corpus_b: CorpusSpec,
    pub bpe: BpeSection,
    pub stage0: Stage0Config,
    pub entropy: EntropyTrainConfig,
    pub model: ModelConfig,
    /// Training chunks used to calibrate the entropy threshold.
    pub calibration_chunks: usize,
    pub stage_a: TrainConfig,
    pub stage_b: TrainConfig,
    pub eval: EvalSection,
    pub generate: GenerateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus_a: CorpusSpec::default(),
            corpus_b: CorpusSpec::default(),
            bpe: BpeSection::default(),
            stage0: Stage0Config::default(),
            entropy: EntropyTrainConfig::default(),
            model: ModelConfig::default(),
            calibration_chunks: 64,
            stage_a: TrainConfig::for_stage(Stage::A),
            stage_b: TrainConfig::for_stage(Stage::B),
            eval: EvalSection::default(),
            generate: GenerateSection::default(),
        }
    }
}

/// Sets `dotted.key` in `table` to `raw`, parsed as a TOML value when
/// possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next.as_table_mut().ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve_table_paths(table: &mut toml::Table, base: &Path) {
    let fix = |v: &mut toml::Value| {
        if let toml::Value::String(p) = v {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
    };
    if let Some(v) = table.get_mut("out_dir") {
        fix(v);
    }
    for (section, key) in [("corpus_a", "paths"), ("corpus_b", "paths"), ("eval", "tasks")] {
        if let Some(toml::Value::Array(items)) = table.get_mut(section).and_then(|t| t.get_mut(key)) {
            items.iter_mut().for_each(fix);
        }
    }
}

fn check_stage(table: &toml::Table, section: &str, want: Stage) -> Result<()> {
    let stage = table.get(section).and_then(|s| s.get("stage"));
    if let Some(v) = stage {
        let ok = v.as_str().is_some_and(|s| s.eq_ignore_ascii_case(&want.to_string()));
        if !ok {
            return Err(Error::Config(format!("[{section}] always runs stage {want}; remove `stage = {v}`")));
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text with overrides. Relative paths in the text resolve
    /// against `base`; relative paths in overrides are left as given.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        resolve_table_paths(&mut table, base);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        check_stage(&table, "stage_a", Stage::A)?;
        check_stage(&table, "stage_b", Stage::B)?;
        let mut cfg: PipelineConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.stage_a.stage = Stage::A;
        cfg.stage_b.stage = Stage::B;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Self::from_toml(&text, overrides, &base)
            }
            None => Self::from_toml("", overrides, Path::new("")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage0.validate()?;
        self.entropy.validate()?;
        let layers = self.model.body.layers;
        self.stage_a.validate(layers).map_err(|e| Error::Config(format!("[stage_a] {e}")))?;
        self.stage_b.validate(layers).map_err(|e| Error::Config(format!("[stage_b] {e}")))?;
        if self.bpe.target_size < 257 {
            return Err(Error::Config(format!("[bpe] target_size must be at least 257, got {}", self.bpe.target_size)));
        }
        Ok(())
    }

    /// Short digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::A => &self.stage_a,
            Stage::B => &self.stage_b,
        }
    }

    pub fn paths(&self) -> Paths {
        let d = &self.out_dir;
        Paths {
            vocab: d.join("vocab.json"),
            teacher: d.join("teacher.ckpt"),
            entropy: d.join("entropy.ckpt"),
            stage_a: d.join("stage_a.ckpt"),
            stage_b: d.join("stage_b.ckpt"),
            metrics_dir: d.join("metrics"),
        }
    }
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paths {
    pub vocab: PathBuf,
    pub teacher: PathBuf,
    pub entropy: PathBuf,
    pub stage_a: PathBuf,
    pub stage_b: PathBuf,
    pub metrics_dir: PathBuf,
}

impl Paths {
    pub fn checkpoint(&self, stage: Stage) -> &Path {
        match stage {
            Stage::A => &self.stage_a,
            Stage::B => &self.stage_b,
        }
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.metrics_dir.join(format!("{name}.jsonl"))
    }
}
