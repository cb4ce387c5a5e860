//! Bits per byte, length-normalized multiple-choice scoring, and the
//! token-versus-patch fertility comparison.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bpe::BpeVocab;
use crate::entropy_lm::ByteLm;
use crate::error::{invalid, Error, Result};
use crate::patching::Patching;
use crate::teacher::{token_continuation_log_probs, TokenLm};

/// Something that can score text in its own units.
pub trait Scorer {
    /// Log-probability (nats) of each unit of `continuation` given
    /// `context` and the preceding units.
    fn continuation_log_probs(&self, context: &[u8], continuation: &[u8]) -> Result<Vec<f64>>;

    /// Total negative log-likelihood of `doc` in bits.
    fn document_bits(&self, doc: &[u8]) -> Result<f64>;
}

/// Byte-level scoring of any [`ByteLm`]; units are bytes.
#[derive(Clone, Copy, Debug)]
pub struct BytePath<M>(pub M);

impl<M: ByteLm> Scorer for BytePath<M> {
    fn continuation_log_probs(&self, context: &[u8], continuation: &[u8]) -> Result<Vec<f64>> {
        if continuation.is_empty() {
            return Err(Error::Empty("continuation"));
        }
        let mut x = context.to_vec();
        x.extend_from_slice(&continuation[..continuation.len() - 1]);
        let lp = self.0.log_probs(&x)?;
        Ok(continuation.iter().enumerate().map(|(k, &b)| lp.get(context.len() + k, b as usize)).collect())
    }

    fn document_bits(&self, doc: &[u8]) -> Result<f64> {
        if doc.is_empty() {
            return Ok(0.0);
        }
        let lp = self.0.log_probs(doc)?;
        Ok(-doc.iter().enumerate().map(|(i, &b)| lp.get(i, b as usize)).sum::<f64>() / core::f64::consts::LN_2)
    }
}

/// The token-level baseline; units are BPE tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenPath<'a> {
    pub lm: &'a TokenLm,
    pub vocab: &'a BpeVocab,
}

impl Scorer for TokenPath<'_> {
    fn continuation_log_probs(&self, context: &[u8], continuation: &[u8]) -> Result<Vec<f64>> {
        token_continuation_log_probs(self.lm, self.vocab, context, continuation)
    }

    fn document_bits(&self, doc: &[u8]) -> Result<f64> {
        let ids = self.vocab.encode(doc).ids;
        if ids.is_empty() {
            return Ok(0.0);
        }
        let lp = self.lm.log_probs(&ids[..ids.len() - 1])?;
        Ok(-ids.iter().enumerate().map(|(i, &t)| lp.get(i, t as usize)).sum::<f64>() / core::f64::consts::LN_2)
    }
}

/// Total bits over total bytes; every byte of every document counts once.
pub fn bits_per_byte<'a, S, I>(scorer: &S, corpus: I) -> Result<f64>
where
    S: Scorer + ?Sized,
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut bits = 0.0;
    let mut bytes = 0usize;
    for doc in corpus {
        bits += scorer.document_bits(doc)?;
        bytes += doc.len();
    }
    if bytes == 0 {
        return Err(Error::Empty("evaluation corpus"));
    }
    Ok(bits / bytes as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McItem {
    pub prompt: String,
    pub choices: Vec<String>,
    pub gold: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(invalid!("an item needs at least two choices, got {}", self.choices.len()));
        }
        if self.gold >= self.choices.len() {
            return Err(invalid!("gold index {} out of range for {} choices", self.gold, self.choices.len()));
        }
        if let Some(i) = self.choices.iter().position(String::is_empty) {
            return Err(invalid!("choice {i} is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McScore {
    /// Mean unit log-probability of each choice.
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

/// Scores every choice as a continuation of the prompt and picks the best,
/// breaking ties toward the lowest index.
pub fn score_mc<S: Scorer + ?Sized>(scorer: &S, item: &McItem) -> Result<McScore> {
    item.validate()?;
    let mut scores = Vec::with_capacity(item.choices.len());
    for c in &item.choices {
        let lp = scorer.continuation_log_probs(item.prompt.as_bytes(), c.as_bytes())?;
        scores.push(lp.iter().sum::<f64>() / lp.len() as f64);
    }
    let mut predicted = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[predicted] {
            predicted = i;
        }
    }
    Ok(McScore { scores, predicted, gold: item.gold })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub scores: Vec<McScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub config_hash: String,
    pub bpb: Option<f64>,
    pub mean_patch_size: Option<f64>,
    pub tasks: Vec<TaskReport>,
}

/// A named list of items.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub items: Vec<McItem>,
}

/// Zero-shot accuracy on every task plus held-out BPB. Nothing is
/// generated.
pub fn eval_suite<S: Scorer + ?Sized>(
    scorer: &S,
    tasks: &[Task],
    heldout: &[Vec<u8>],
    model_tag: &str,
    config_hash: &str,
    mean_patch_size: Option<f64>,
) -> Result<EvalReport> {
    let bpb = if heldout.iter().all(Vec::is_empty) { None } else { Some(bits_per_byte(scorer, heldout.iter().map(Vec::as_slice))?) };
    let mut reports = Vec::with_capacity(tasks.len());
    for t in tasks {
        if t.items.is_empty() {
            return Err(invalid!("task {} has no items", t.name));
        }
        let scores = t
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| score_mc(scorer, it).map_err(|e| invalid!("task {} item {i}: {e}", t.name)))
            .collect::<Result<Vec<_>>>()?;
        let correct = scores.iter().filter(|s| s.predicted == s.gold).count();
        reports.push(TaskReport {
            name: t.name.clone(),
            items: scores.len(),
            correct,
            accuracy: correct as f64 / scores.len() as f64,
            scores,
        });
    }
    Ok(EvalReport { model_tag: model_tag.into(), config_hash: config_hash.into(), bpb, mean_patch_size, tasks: reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityRow {
    pub document: usize,
    pub bytes: usize,
    pub tokens: usize,
    pub patches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityTable {
    pub rows: Vec<FertilityRow>,
    pub total_bytes: usize,
    pub total_tokens: usize,
    pub total_patches: usize,
    pub tokens_per_byte: Option<f64>,
    pub patches_per_byte: Option<f64>,
    /// BPE tokens per patch.
    pub ratio: Option<f64>,
    pub skipped_empty: usize,
}

/// BPE token counts against patch counts over the same documents.
pub fn compare_fertility<'a, I>(vocab: &BpeVocab, docs: I, mut patch: impl FnMut(&[u8]) -> Result<Patching>) -> Result<FertilityTable>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut rows = Vec::new();
    let mut skipped_empty = 0;
    for (i, d) in docs.into_iter().enumerate() {
        if d.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let patches = patch(d)?.m();
        rows.push(FertilityRow { document: i, bytes: d.len(), tokens: vocab.encode(d).len(), patches });
    }
    let total_bytes: usize = rows.iter().map(|r| r.bytes).sum();
    let total_tokens: usize = rows.iter().map(|r| r.tokens).sum();
    let total_patches: usize = rows.iter().map(|r| r.patches).sum();
    let div = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(FertilityTable {
        tokens_per_byte: div(total_tokens, total_bytes),
        patches_per_byte: div(total_patches, total_bytes),
        ratio: div(total_tokens, total_patches),
        rows,
        total_bytes,
        total_tokens,
        total_patches,
        skipped_empty,
    })
}
