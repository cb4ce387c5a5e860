//! Byte-level byte-pair encoding: the token-fertility baseline and the
//! tokenizer of the pretrained teacher body.
//!
//! Ids `0..256` are the single bytes, so every byte string is encodable.
//! Pretokenization splits text into words before each whitespace run that
//! follows a non-whitespace byte, so a word carries its leading whitespace
//! (`"ab cd"` becomes `"ab"`, `" cd"`). Pair counts never cross words.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// One merge rule: adjacent `(left, right)` becomes `result`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<Merge>,
    tokens: Vec<Vec<u8>>,
    ranks: BTreeMap<(u32, u32), u32>,
    by_bytes: BTreeMap<Vec<u8>, u32>,
}

/// Token ids with the byte span each one covers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Default for BpeVocab {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl BpeVocab {
    /// The 256 single-byte tokens and no merges.
    pub fn byte_level() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let by_bytes = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { merges: Vec::new(), tokens, ranks: BTreeMap::new(), by_bytes }
    }

    /// Rebuilds a vocabulary from its ordered merge list given as byte strings.
    pub fn from_merges(merges: &[(Vec<u8>, Vec<u8>)]) -> Result<Self> {
        let mut v = Self::byte_level();
        for (l, r) in merges {
            let left = *v.by_bytes.get(l).ok_or_else(|| invalid!("merge references unknown token {l:?}"))?;
            let right = *v.by_bytes.get(r).ok_or_else(|| invalid!("merge references unknown token {r:?}"))?;
            if v.ranks.contains_key(&(left, right)) {
                return Err(invalid!("duplicate merge {l:?} + {r:?}"));
            }
            v.push_merge(left, right);
        }
        Ok(v)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> Merge {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.by_bytes.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(bytes.clone());
                self.by_bytes.insert(bytes, id);
                id
            }
        };
        let m = Merge { left, right, result };
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push(m);
        m
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Merges as `(left bytes, right bytes)` pairs, in order.
    pub fn merge_bytes(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|m| (self.tokens[m.left as usize].clone(), self.tokens[m.right as usize].clone()))
            .collect()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.by_bytes.get(bytes).copied()
    }

    pub fn encode(&self, text: &[u8]) -> Encoding {
        let mut enc = Encoding::default();
        let mut offset = 0;
        for word in pretokenize(text) {
            for id in self.encode_word(word) {
                let len = self.tokens[id as usize].len();
                enc.ids.push(id);
                enc.spans.push((offset, offset + len));
                offset += len;
            }
        }
        enc
    }

    /// Applies merges to one pretokenized word, lowest rank first.
    pub fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut syms: Vec<u32> = word.iter().map(|&b| b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let m = self.merges[rank as usize];
            syms = apply_merge(&syms, m);
        }
        syms
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token_bytes(id).ok_or_else(|| invalid!("token id {id} outside vocabulary of {}", self.size()))?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }
}

fn apply_merge(syms: &[u32], m: Merge) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == m.left && syms[i + 1] == m.right {
            out.push(m.result);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Splits text into words; a new word starts at a whitespace byte that
/// follows a non-whitespace byte. The pieces tile the input.
pub fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if text[i].is_ascii_whitespace() && !text[i - 1].is_ascii_whitespace() {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Trains merges greedily until the vocabulary reaches `target_size`
/// tokens or no adjacent pair occurs at least twice. Ties in pair count go
/// to the lexicographically smallest `(left bytes, right bytes)`.
pub fn train_bpe<'a, I>(corpus: I, target_size: usize) -> Result<BpeVocab>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    if target_size < 257 {
        return Err(invalid!("target vocabulary size {target_size} must be at least 257"));
    }
    let mut word_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    let mut any = false;
    for doc in corpus {
        any = true;
        for w in pretokenize(doc) {
            *word_counts.entry(w).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Empty("BPE training corpus"));
    }
    let mut words: Vec<(Vec<u32>, u64)> =
        word_counts.into_iter().map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c)).collect();

    let mut vocab = BpeVocab::byte_level();
    while vocab.size() < target_size {
        let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += c;
            }
        }
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &c) in &counts {
            if c < 2 || vocab.ranks.contains_key(&pair) {
                continue;
            }
            best = match best {
                None => Some((pair, c)),
                Some((bp, bc)) => {
                    let better = c > bc
                        || (c == bc
                            && (vocab.tokens[pair.0 as usize].as_slice(), vocab.tokens[pair.1 as usize].as_slice())
                                < (vocab.tokens[bp.0 as usize].as_slice(), vocab.tokens[bp.1 as usize].as_slice()));
                    if better { Some((pair, c)) } else { Some((bp, bc)) }
                }
            };
        }
        let Some(((l, r), _)) = best else { break };
        let m = vocab.push_merge(l, r);
        for (syms, _) in &mut words {
            if syms.windows(2).any(|w| w[0] == l && w[1] == r) {
                *syms = apply_merge(syms, m);
            }
        }
    }
    Ok(vocab)
}

/// Mean number of tokens per word.
pub fn fertility(vocab: &BpeVocab, words: &[&[u8]]) -> Result<f64> {
    if words.is_empty() {
        return Err(Error::Empty("fertility word list"));
    }
    let total: usize = words.iter().map(|w| vocab.encode(w).len()).sum();
    Ok(total as f64 / words.len() as f64)
}
