//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length (all little
//! endian), a JSON header, then every tensor listed in the header as
//! row-major little-endian `f64`, in header order. The header carries a
//! SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bytepatch_core::body::BodyConfig;
use bytepatch_core::entropy_lm::{EntropyLm, EntropyLmConfig};
use bytepatch_core::model::{ByteModel, ModelConfig, Patcher, PatcherKind};
use bytepatch_core::optim::{AdamW, Moments, OptimConfig};
use bytepatch_core::params::ParamStore;
use bytepatch_core::rng::RngState;
use bytepatch_core::teacher::TokenLm;
use bytepatch_core::train::{RunningLoss, Stage, TrainState};
use bytepatch_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"BYTEPCH\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ByteModel,
    TokenLm,
    EntropyLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub step: u64,
    pub optimizer_step: u64,
    pub optim: OptimConfig,
    pub rng: RngState,
    pub running: RunningLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ArtifactKind,
    pub stage: Option<Stage>,
    pub meta: serde_json::Value,
    pub sections: Vec<Section>,
    pub train_state: Option<StateHeader>,
    pub payload_sha256: String,
}

/// A parsed checkpoint: header plus tensors keyed by `(section, name)`.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub header: Header,
    pub tensors: BTreeMap<(String, String), Tensor>,
}

const SECTION_M: &str = "optimizer.m";
const SECTION_V: &str = "optimizer.v";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn section_of<'a>(name: &str, store: &'a ParamStore) -> (Section, Vec<&'a Tensor>) {
    let mut tensors = Vec::new();
    let mut values = Vec::new();
    for (_, p) in store.iter() {
        let (rows, cols) = p.value.shape();
        tensors.push(TensorEntry { name: p.name.clone(), group: p.group.clone(), rows, cols, decay: p.decay, trainable: p.trainable });
        values.push(&p.value);
    }
    (Section { name: name.into(), tensors }, values)
}

/// Writes stores (and optionally optimizer state for the first store) to
/// `path`.
pub fn write_checkpoint(
    path: &Path,
    kind: ArtifactKind,
    stage: Option<Stage>,
    meta: serde_json::Value,
    stores: &[(&str, &ParamStore)],
    state: Option<&TrainState>,
) -> Result<()> {
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    for (name, store) in stores {
        let (s, values) = section_of(name, store);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        sections.push(s);
    }
    let train_state = match state {
        None => None,
        Some(st) => {
            let store = stores.first().map(|s| s.1).ok_or_else(|| Error::Config("train state needs a model store".into()))?;
            for (label, pick) in [(SECTION_M, 0), (SECTION_V, 1)] {
                let mut tensors = Vec::new();
                for ((_, p), mo) in store.iter().zip(&st.optimizer.moments) {
                    if let Some(mo) = mo {
                        let t = if pick == 0 { &mo.m } else { &mo.v };
                        let (rows, cols) = t.shape();
                        tensors.push(TensorEntry { name: p.name.clone(), group: p.group.clone(), rows, cols, decay: p.decay, trainable: p.trainable });
                        payload.extend_from_slice(&t.to_le_bytes());
                    }
                }
                sections.push(Section { name: label.into(), tensors });
            }
            Some(StateHeader {
                step: st.step,
                optimizer_step: st.optimizer.step,
                optim: st.optimizer.config,
                rng: RngState::capture(&st.rng),
                running: st.running,
            })
        }
    };
    let header = Header { kind, stage, meta, sections, train_state, payload_sha256: hex(&Sha256::digest(&payload)) };
    let json = serde_json::to_vec(&header).map_err(|source| Error::Json { context: "checkpoint header".into(), source })?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(format_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|source| Error::Json { context: format!("{} header", path.display()), source })?;
    let payload = &body[hlen..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(format_err(path, "payload checksum mismatch"));
    }
    let mut tensors = BTreeMap::new();
    let mut at = 0;
    for s in &header.sections {
        for t in &s.tensors {
            let n = t.rows * t.cols;
            let end = at + 8 * n;
            if end > payload.len() {
                return Err(format_err(path, format!("payload too short for {}", t.name)));
            }
            let data = payload[at..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert((s.name.clone(), t.name.clone()), Tensor::from_vec(t.rows, t.cols, data));
            at = end;
        }
    }
    if at != payload.len() {
        return Err(format_err(path, "trailing bytes after the last tensor"));
    }
    Ok(RawCheckpoint { header, tensors })
}

impl RawCheckpoint {
    fn expect_kind(&self, path: &Path, kind: ArtifactKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(format_err(path, format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        Ok(())
    }

    /// Overwrites every tensor of `store` from `section`; the name sets must
    /// match exactly.
    pub fn load_store(&self, path: &Path, section: &str, store: &mut ParamStore) -> Result<()> {
        let Some(s) = self.header.sections.iter().find(|s| s.name == section) else {
            return Err(format_err(path, format!("missing section {section}")));
        };
        if s.tensors.len() != store.len() {
            return Err(format_err(path, format!("section {section} has {} tensors, model expects {}", s.tensors.len(), store.len())));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = store.param(id).name.clone();
            let t = self
                .tensors
                .get(&(section.to_string(), name.clone()))
                .ok_or_else(|| format_err(path, format!("section {section} lacks {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(format_err(path, format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), store.value(id).shape())));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, path: &Path, key: &str) -> Result<T> {
        let v = self.header.meta.get(key).cloned().ok_or_else(|| format_err(path, format!("header lacks {key}")))?;
        serde_json::from_value(v).map_err(|source| Error::Json { context: format!("{} meta {key}", path.display()), source })
    }

    fn train_state(&self, path: &Path, store: &ParamStore) -> Result<Option<TrainState>> {
        let Some(h) = &self.header.train_state else {
            return Ok(None);
        };
        let mut opt = AdamW::new(h.optim, store);
        opt.step = h.optimizer_step;
        for (id, p) in store.iter() {
            let m = self.tensors.get(&(SECTION_M.to_string(), p.name.clone()));
            let v = self.tensors.get(&(SECTION_V.to_string(), p.name.clone()));
            match (m, v) {
                (Some(m), Some(v)) => opt.moments[id.index()] = Some(Moments { m: m.clone(), v: v.clone() }),
                (None, None) => {}
                _ => return Err(format_err(path, format!("incomplete optimizer moments for {}", p.name))),
            }
        }
        Ok(Some(TrainState { optimizer: opt, rng: h.rng.restore(), step: h.step, running: h.running }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatcherMeta {
    Entropy { threshold: f64, max_len: Option<usize> },
    Fixed { k: usize, max_len: Option<usize> },
    Whitespace { max_len: Option<usize> },
}

pub fn save_token_lm(path: &Path, lm: &TokenLm) -> Result<()> {
    let meta = serde_json::json!({ "body": lm.body_config, "bpe_size": lm.vocab_size - 1 });
    write_checkpoint(path, ArtifactKind::TokenLm, None, meta, &[("model", &lm.store)], None)
}

pub fn load_token_lm(path: &Path) -> Result<TokenLm> {
    let raw = read_checkpoint(path)?;
    raw.expect_kind(path, ArtifactKind::TokenLm)?;
    let body: BodyConfig = raw.meta(path, "body")?;
    let bpe_size: usize = raw.meta(path, "bpe_size")?;
    let mut lm = TokenLm::new(body, bpe_size, 0)?;
    raw.load_store(path, "model", &mut lm.store)?;
    Ok(lm)
}

pub fn save_entropy_lm(path: &Path, lm: &EntropyLm) -> Result<()> {
    let meta = serde_json::json!({ "config": lm.config });
    write_checkpoint(path, ArtifactKind::EntropyLm, None, meta, &[("model", &lm.store)], None)
}

pub fn load_entropy_lm(path: &Path) -> Result<EntropyLm> {
    let raw = read_checkpoint(path)?;
    raw.expect_kind(path, ArtifactKind::EntropyLm)?;
    let config: EntropyLmConfig = raw.meta(path, "config")?;
    let mut lm = EntropyLm::new(config, 0)?;
    raw.load_store(path, "model", &mut lm.store)?;
    Ok(lm)
}

/// A byte model restored from disk.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: ByteModel,
    pub stage: Option<Stage>,
    pub state: Option<TrainState>,
}

pub fn save_byte_model(path: &Path, model: &ByteModel, stage: Option<Stage>, state: Option<&TrainState>) -> Result<()> {
    let max_len = model.patcher.max_len;
    let (patcher, entropy) = match &model.patcher.kind {
        PatcherKind::Entropy { lm, threshold } => (PatcherMeta::Entropy { threshold: *threshold, max_len }, Some(lm)),
        PatcherKind::Fixed { k } => (PatcherMeta::Fixed { k: *k, max_len }, None),
        PatcherKind::Whitespace => (PatcherMeta::Whitespace { max_len }, None),
    };
    let mut meta = serde_json::json!({ "config": model.config, "patcher": patcher });
    let mut stores: Vec<(&str, &ParamStore)> = vec![("model", &model.store)];
    if let Some(lm) = entropy {
        meta["entropy_lm"] = serde_json::to_value(lm.config).expect("config serializes");
        stores.push(("entropy_lm", &lm.store));
    }
    write_checkpoint(path, ArtifactKind::ByteModel, stage, meta, &stores, state)
}

pub fn load_byte_model(path: &Path) -> Result<LoadedModel> {
    let raw = read_checkpoint(path)?;
    raw.expect_kind(path, ArtifactKind::ByteModel)?;
    let config: ModelConfig = raw.meta(path, "config")?;
    let patcher = match raw.meta::<PatcherMeta>(path, "patcher")? {
        PatcherMeta::Fixed { k, max_len } => Patcher { kind: PatcherKind::Fixed { k }, max_len },
        PatcherMeta::Whitespace { max_len } => Patcher { kind: PatcherKind::Whitespace, max_len },
        PatcherMeta::Entropy { threshold, max_len } => {
            let cfg: EntropyLmConfig = raw.meta(path, "entropy_lm")?;
            let mut lm = EntropyLm::new(cfg, 0)?;
            raw.load_store(path, "entropy_lm", &mut lm.store)?;
            Patcher { kind: PatcherKind::Entropy { lm, threshold }, max_len }
        }
    };
    let mut model = ByteModel::new(config, 0, None, patcher)?;
    raw.load_store(path, "model", &mut model.store)?;
    let state = raw.train_state(path, &model.store)?;
    Ok(LoadedModel { model, stage: raw.header.stage, state })
}
