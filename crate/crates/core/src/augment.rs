//! Zero-shot attribute augmentation.
//!
//! A record with unfilled attribute slots gets them filled by trying every
//! vocabulary value: each value is appended to the record's text as
//! `"<text>, <value>"`, all candidate texts are embedded in one provider
//! call, and the candidate whose embedding has the highest dot product with
//! the record's image embedding wins. Filled slots are never overwritten.
//!
//! Several missing slots are resolved greedily in vocabulary slot order,
//! each one building its candidates from the text already extended by the
//! previous winners. [`AugmentMode::Joint`] instead scores every
//! combination of values at once, which is only practical for small
//! vocabularies.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::EmbeddingProvider;
use crate::similarity::dot;
use crate::store::{EmbeddingMatrix, Manifest, SampleRecord};

/// Separator placed between the existing text and an appended value.
pub const SEPARATOR: &str = ", ";

/// Upper bound on the candidate count of a joint search.
pub const MAX_JOINT_CANDIDATES: usize = 100_000;

fn default_slots() -> Vec<String> {
    vec!["color".into(), "brand".into(), "type".into()]
}

/// The finite universe of attribute values, per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    #[serde(default = "default_slots")]
    slots: Vec<String>,
    values: BTreeMap<String, Vec<String>>,
}

impl AttributeVocabulary {
    pub fn new(slots: Vec<String>, values: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let v = AttributeVocabulary { slots, values };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for slot in &self.slots {
            if !seen.insert(slot.as_str()) {
                return Err(Error::Config(format!("slot {slot:?} listed twice")));
            }
            let values = self
                .values
                .get(slot)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::Config(format!("slot {slot:?} has no values")))?;
            let mut uniq = HashSet::new();
            if let Some(dup) = values.iter().find(|v| !uniq.insert(v.as_str())) {
                return Err(Error::Config(format!(
                    "slot {slot:?} lists value {dup:?} twice"
                )));
            }
        }
        if let Some(extra) = self.values.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(Error::Config(format!(
                "values given for undeclared slot {extra:?}"
            )));
        }
        Ok(())
    }

    /// Reads a vocabulary file, `{"slots": [...], "values": {...}}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: AttributeVocabulary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn values(&self, slot: &str) -> Option<&[String]> {
        self.values.get(slot).map(Vec::as_slice)
    }

    pub fn contains_slot(&self, slot: &str) -> bool {
        self.slots.iter().any(|s| s == slot)
    }
}

/// How several missing slots of one record are resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AugmentMode {
    /// One slot at a time, in slot order.
    #[default]
    Greedy,
    /// All combinations of the missing slots' values scored together.
    Joint,
}

/// Vocabulary slots that `record` leaves unfilled, in slot order.
///
/// A slot is unfilled when it is absent from the record or mapped to null.
pub fn missing_slots<'v>(record: &SampleRecord, vocab: &'v AttributeVocabulary) -> Vec<&'v str> {
    vocab
        .slots()
        .iter()
        .filter(|s| record.attribute(s).is_none())
        .map(String::as_str)
        .collect()
}

/// Candidate texts for filling `slot`, one per vocabulary value, in
/// vocabulary order.
pub fn generate_candidates(
    record: &SampleRecord,
    vocab: &AttributeVocabulary,
    slot: &str,
) -> Result<Vec<String>> {
    let text = record.text.as_deref().ok_or_else(|| {
        Error::Precondition(format!("record {:?} has no text to extend", record.id))
    })?;
    if !vocab.contains_slot(slot) {
        return Err(Error::Config(format!(
            "slot {slot:?} is not in the vocabulary"
        )));
    }
    if let Some(v) = record.attribute(slot) {
        return Err(Error::Precondition(format!(
            "record {:?} already has {slot} = {v:?}",
            record.id
        )));
    }
    let values = vocab
        .values(slot)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Config(format!("slot {slot:?} has no values")))?;
    Ok(values
        .iter()
        .map(|v| format!("{text}{SEPARATOR}{v}"))
        .collect())
}

/// Index of the candidate with the highest dot product against `image`,
/// ties resolved to the lowest index.
pub fn select_best<T>(image: &[T], candidates: &EmbeddingMatrix) -> Result<usize>
where
    T: Copy + Into<f64>,
{
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidates to choose from".into()));
    }
    if image.len() != candidates.dim() {
        return Err(Error::shape(
            candidates.dim(),
            image.len(),
            "image embedding",
        ));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, row) in candidates.iter_rows().enumerate() {
        let s = dot(image, row);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

fn check_slot_names(record: &SampleRecord, vocab: &AttributeVocabulary) -> Result<()> {
    match record.attributes.keys().find(|k| !vocab.contains_slot(k)) {
        Some(k) => Err(Error::Validation(format!(
            "record {:?} has attribute {k:?} outside the vocabulary",
            record.id
        ))),
        None => Ok(()),
    }
}

fn embed_checked(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    dim: usize,
) -> Result<EmbeddingMatrix> {
    let m = provider.embed_texts(texts)?;
    if m.rows() != texts.len() {
        return Err(Error::Provider(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            m.rows()
        )));
    }
    if m.dim() != dim {
        return Err(Error::shape(dim, m.dim(), "provider embedding"));
    }
    Ok(m)
}

/// Fills every missing slot of `record` greedily, in slot order.
pub fn augment_record<T>(
    record: &SampleRecord,
    vocab: &AttributeVocabulary,
    image: &[T],
    provider: &dyn EmbeddingProvider,
) -> Result<SampleRecord>
where
    T: Copy + Into<f64>,
{
    check_slot_names(record, vocab)?;
    let missing = missing_slots(record, vocab);
    if missing.is_empty() {
        return Ok(record.clone());
    }
    let mut out = record.clone();
    for slot in missing {
        let candidates = generate_candidates(&out, vocab, slot)?;
        let embedded = embed_checked(provider, &candidates, image.len())?;
        let best = select_best(image, &embedded)?;
        let value = vocab.values(slot).expect("slot validated")[best].clone();
        out.text = Some(candidates[best].clone());
        out.attributes.insert(slot.to_string(), Some(value));
    }
    Ok(out)
}

/// Fills every missing slot of `record` at once by scoring all value
/// combinations in a single provider call.
pub fn augment_record_joint<T>(
    record: &SampleRecord,
    vocab: &AttributeVocabulary,
    image: &[T],
    provider: &dyn EmbeddingProvider,
) -> Result<SampleRecord>
where
    T: Copy + Into<f64>,
{
    check_slot_names(record, vocab)?;
    let missing = missing_slots(record, vocab);
    if missing.is_empty() {
        return Ok(record.clone());
    }
    let text = record.text.as_deref().ok_or_else(|| {
        Error::Precondition(format!("record {:?} has no text to extend", record.id))
    })?;
    let value_lists: Vec<&[String]> = missing
        .iter()
        .map(|s| vocab.values(s).expect("slot validated"))
        .collect();
    let total = value_lists
        .iter()
        .try_fold(1usize, |acc, v| acc.checked_mul(v.len()))
        .filter(|&n| n <= MAX_JOINT_CANDIDATES)
        .ok_or_else(|| {
            Error::Config(format!(
                "joint augmentation would need more than {MAX_JOINT_CANDIDATES} candidates"
            ))
        })?;

    // Combination `c` in mixed radix, last slot varying fastest.
    let decode = |mut c: usize| {
        let mut idx = vec![0usize; value_lists.len()];
        for (slot, list) in value_lists.iter().enumerate().rev() {
            idx[slot] = c % list.len();
            c /= list.len();
        }
        idx
    };
    let texts: Vec<String> = (0..total)
        .map(|c| {
            let mut t = text.to_string();
            for (list, i) in value_lists.iter().zip(decode(c)) {
                t.push_str(SEPARATOR);
                t.push_str(&list[i]);
            }
            t
        })
        .collect();

    let embedded = embed_checked(provider, &texts, image.len())?;
    let best = select_best(image, &embedded)?;
    let mut out = record.clone();
    out.text = Some(texts[best].clone());
    for ((slot, list), i) in missing.iter().zip(&value_lists).zip(decode(best)) {
        out.attributes
            .insert(slot.to_string(), Some(list[i].clone()));
    }
    Ok(out)
}

/// Augments every record of `manifest`, using row `i` of `images` as the
/// image embedding of record `i`. Records are processed concurrently; the
/// output keeps manifest order.
pub fn augment_manifest(
    manifest: &Manifest,
    images: &EmbeddingMatrix,
    vocab: &AttributeVocabulary,
    provider: &dyn EmbeddingProvider,
    mode: AugmentMode,
) -> Result<Manifest> {
    manifest.check_aligned(images, "augment")?;
    let records = manifest
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let image = images.row(i);
            match mode {
                AugmentMode::Greedy => augment_record(r, vocab, image, provider),
                AugmentMode::Joint => augment_record_joint(r, vocab, image, provider),
            }
            .map_err(|e| match e {
                Error::Precondition(m) => Error::Precondition(format!("row {i}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}
