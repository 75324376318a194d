//! Shared domain types.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Binary toxicity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Benign = 0,
    Toxic = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_toxic(self) -> bool {
        self == Label::Toxic
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Benign => Label::Toxic,
            Label::Toxic => Label::Benign,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Toxic),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<bool> for Label {
    fn from(toxic: bool) -> Self {
        if toxic {
            Label::Toxic
        } else {
            Label::Benign
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub id: String,
    pub text: String,
    pub label: Label,
    /// Duplicate-group key; items sharing it are never split apart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Free-form subcategory, e.g. "jailbreak". Carried, never used as a class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl LabeledPrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        LabeledPrompt {
            id: id.into(),
            text: text.into(),
            label,
            group: None,
            tag: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    /// SHA-256 of the UTF-8 prompt text, hex encoded.
    pub fn text_digest(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }

    fn group_key(&self) -> GroupKey<'_> {
        match &self.group {
            Some(g) => GroupKey::Named(g),
            None => GroupKey::Singleton(&self.id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum GroupKey<'a> {
    Named(&'a str),
    Singleton(&'a str),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<LabeledPrompt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ClassCounts {
    pub benign: usize,
    pub toxic: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub duplicate_ids: Vec<String>,
    /// Items whose id is the empty string.
    pub empty_ids: usize,
    pub empty_texts: Vec<String>,
    pub counts: ClassCounts,
}

impl ValidationReport {
    /// True when both classes are present, which training requires.
    pub fn trainable(&self) -> bool {
        self.accepted && self.counts.benign > 0 && self.counts.toxic > 0
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<LabeledPrompt>) -> Self {
        Dataset {
            name: name.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> ValidationReport {
        validate_dataset(self)
    }
}

/// Accepts a dataset iff ids are nonempty and unique and no text is empty.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut seen = HashSet::new();
    let mut dup_set = HashSet::new();
    let mut duplicate_ids = Vec::new();
    let mut empty_texts = Vec::new();
    let mut counts = ClassCounts::default();
    for item in &d.items {
        if !seen.insert(item.id.as_str()) && dup_set.insert(item.id.as_str()) {
            duplicate_ids.push(item.id.clone());
        }
        if item.text.is_empty() {
            empty_texts.push(item.id.clone());
        }
        match item.label {
            Label::Benign => counts.benign += 1,
            Label::Toxic => counts.toxic += 1,
        }
    }
    let empty_ids = d.items.iter().filter(|i| i.id.is_empty()).count();
    ValidationReport {
        accepted: duplicate_ids.is_empty() && empty_texts.is_empty() && empty_ids == 0,
        duplicate_ids,
        empty_ids,
        empty_texts,
        counts,
    }
}

/// Splits a dataset into (train, test) without breaking duplicate groups.
///
/// Groups are ordered by first appearance, shuffled with a seeded ChaCha8
/// generator, and the first `round(train_fraction * #groups)` go to train.
/// Item order inside each side follows the input order.
pub fn split_dataset(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut group_index: HashMap<GroupKey<'_>, usize> = HashMap::new();
    let mut item_group = Vec::with_capacity(d.items.len());
    for item in &d.items {
        let next = group_index.len();
        let g = *group_index.entry(item.group_key()).or_insert(next);
        item_group.push(g);
    }
    let n_groups = group_index.len();
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * n_groups as f64).round() as usize;
    let mut in_train = vec![false; n_groups];
    for &g in &order[..n_train.min(n_groups)] {
        in_train[g] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (item, g) in d.items.iter().zip(item_group) {
        if in_train[g] {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((
        Dataset::new(format!("{}/train", d.name), train),
        Dataset::new(format!("{}/test", d.name), test),
    ))
}

/// One prompt's first-response-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub prompt_id: String,
    pub label: Label,
    pub logits: Vec<f32>,
    pub backend_fingerprint: String,
    pub text_sha256: String,
    /// Set when the backend only returned top-k logprobs and the rest were filled.
    pub partial: bool,
}

impl LogitRecord {
    pub fn check_finite(&self) -> Result<()> {
        match self.logits.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::data(format!(
                "record {}: non-finite logit at index {i}",
                self.prompt_id
            ))),
            None => Ok(()),
        }
    }
}

/// Identifies the inference backend that produced a set of logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub endpoint: String,
    pub model_name: String,
    pub chat_template_id: String,
    pub vocab_size: usize,
    /// Hex digest of the token-id to string table.
    pub vocab_hash: String,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::invalid("backend vocab_size must be positive"));
        }
        Ok(())
    }

    /// Digest binding logits to (model, chat template, vocabulary).
    pub fn fingerprint(&self) -> String {
        backend_fingerprint(&self.model_name, &self.chat_template_id, &self.vocab_hash)
    }
}

pub fn backend_fingerprint(model_name: &str, chat_template_id: &str, vocab_hash: &str) -> String {
    let joined = format!("{model_name}\u{0}{chat_template_id}\u{0}{vocab_hash}");
    sha256_hex(joined.as_bytes())[..32].to_string()
}

/// Hash of a vocabulary table given in token-id order.
pub fn vocab_hash<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut buf = Vec::new();
    for t in tokens {
        buf.extend_from_slice(t.as_ref().as_bytes());
        buf.push(0);
    }
    sha256_hex(&buf)
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Keeps only the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Per-class counts of a label vector.
pub fn label_counts(labels: &[Label]) -> BTreeMap<Label, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}
