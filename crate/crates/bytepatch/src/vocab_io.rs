//! Vocabulary files: JSON with a format version and the merge list, each
//! side hex-encoded so arbitrary bytes survive.

use std::fs;
use std::path::Path;

use bytepatch_core::bpe::BpeVocab;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub format_version: u32,
    pub size: usize,
    pub merges: Vec<(String, String)>,
}

fn to_hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

pub fn save_vocab(path: &Path, vocab: &BpeVocab) -> Result<()> {
    let file = VocabFile {
        format_version: FORMAT_VERSION,
        size: vocab.size(),
        merges: vocab.merge_bytes().iter().map(|(l, r)| (to_hex(l), to_hex(r))).collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|source| Error::Json { context: "vocab".into(), source })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, json).map_err(io_err(path))
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: VocabFile = serde_json::from_str(&text).map_err(|source| Error::Json { context: path.display().to_string(), source })?;
    if file.format_version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported vocab format_version {}", file.format_version)));
    }
    let merges = file
        .merges
        .iter()
        .enumerate()
        .map(|(i, (l, r))| match (from_hex(l), from_hex(r)) {
            (Some(l), Some(r)) => Ok((l, r)),
            _ => Err(format_err(path, format!("merge {i} is not hex"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = BpeVocab::from_merges(&merges)?;
    if vocab.size() != file.size {
        return Err(format_err(path, format!("declared size {} but merges give {}", file.size, vocab.size())));
    }
    Ok(vocab)
}
