//! Corpus ingestion: document parsing, UTF-8 validation, a seeded
//! train/validation split and chunking on code point boundaries.

use std::fs;
use std::path::{Path, PathBuf};

use bytepatch_core::rng::seeded;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Documents separated by blank lines.
    #[default]
    Plain,
    /// One JSON object per line with the text under `text_field`.
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub paths: Vec<PathBuf>,
    pub format: CorpusFormat,
    pub text_field: String,
    /// Share of documents held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Maximum chunk length in bytes.
    pub chunk_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { paths: Vec::new(), format: CorpusFormat::Plain, text_field: "text".into(), val_fraction: 0.05, seed: 0, chunk_len: 512 }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.chunk_len < 2 {
            return Err(Error::Config(format!("chunk_len must be at least 2, got {}", self.chunk_len)));
        }
        if self.paths.is_empty() {
            return Err(Error::Config("corpus has no input paths".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Vec<u8>>,
    pub val: Vec<Vec<u8>>,
    pub documents: usize,
    pub train_documents: usize,
    pub val_documents: usize,
    /// Documents dropped for invalid UTF-8.
    pub dropped_invalid_utf8: usize,
    pub skipped_empty: usize,
}

/// Raw documents of one file, before validation.
pub fn read_documents(path: &Path, format: CorpusFormat, text_field: &str) -> Result<Vec<Vec<u8>>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(match format {
        CorpusFormat::Plain => split_plain(&bytes),
        CorpusFormat::Jsonl => {
            let mut docs = Vec::new();
            for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
                let line = line.strip_suffix(b"\r").unwrap_or(line);
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let Ok(text) = std::str::from_utf8(line) else {
                    docs.push(line.to_vec());
                    continue;
                };
                let v: serde_json::Value =
                    serde_json::from_str(text).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
                match v.get(text_field) {
                    Some(serde_json::Value::String(s)) => docs.push(s.as_bytes().to_vec()),
                    _ => return Err(format_err(path, format!("line {}: no string field {text_field:?}", i + 1))),
                }
            }
            docs
        }
    })
}

fn split_plain(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut docs = Vec::new();
    let mut cur: Vec<u8> = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(u8::is_ascii_whitespace) {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if !cur.is_empty() {
            cur.push(b'\n');
        }
        cur.extend_from_slice(line);
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

/// Splits `doc` into chunks of at most `len` bytes without cutting a code
/// point. A code point longer than `len` becomes its own chunk.
pub fn chunk_utf8(doc: &str, len: usize) -> Vec<&[u8]> {
    let b = doc.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    while start < b.len() {
        let mut end = (start + len).min(b.len());
        while end > start && !doc.is_char_boundary(end) {
            end -= 1;
        }
        if end == start {
            end = start + 1;
            while !doc.is_char_boundary(end) {
                end += 1;
            }
        }
        out.push(&b[start..end]);
        start = end;
    }
    out
}

/// Reads, validates, splits and chunks every document named by `spec`.
pub fn ingest(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut docs: Vec<String> = Vec::new();
    let mut corpus = Corpus::default();
    for p in &spec.paths {
        for d in read_documents(p, spec.format, &spec.text_field)? {
            if d.is_empty() {
                corpus.skipped_empty += 1;
                continue;
            }
            match String::from_utf8(d) {
                Ok(s) => docs.push(s),
                Err(_) => corpus.dropped_invalid_utf8 += 1,
            }
        }
    }
    if docs.len() < 2 {
        return Err(Error::Config(format!("corpus needs at least two valid documents to split, found {}", docs.len())));
    }
    let n = docs.len();
    let n_val = ((n as f64 * spec.val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(spec.seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    for (d, v) in docs.iter().zip(is_val) {
        let target = if v { &mut corpus.val } else { &mut corpus.train };
        target.extend(chunk_utf8(d, spec.chunk_len).into_iter().map(<[u8]>::to_vec));
    }
    corpus.documents = n;
    corpus.val_documents = n_val;
    corpus.train_documents = n - n_val;
    Ok(corpus)
}
