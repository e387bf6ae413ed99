//! Time-sliced bag-of-words corpora.
//!
//! Raw time-stamped records are ingested into a [`CorpusSequence`]: a fixed
//! vocabulary, `T` slices of sparse documents, and one relative-frequency
//! vector per slice. A [`SplitSpec`] assigns each document to train,
//! validation or test; the per-slice vectors are then recomputed from
//! training documents only.

mod bundle;
mod ingest;
mod split;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use bundle::{CorpusBundle, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use ingest::{ingest, parse_records, IngestReport, InputFormat, Record, SliceSpec, VocabOptions};
pub use split::{completion_halves, split, Role, SplitSpec};

use crate::error::{Error, Result};

/// Ordered set of distinct tokens; a token's id is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `w0000, w0001, ...` for synthetic corpora.
    pub fn synthetic(size: usize) -> Result<Self> {
        let width = size.saturating_sub(1).to_string().len().max(4);
        Self::new((0..size).map(|i| format!("w{i:0width$}")).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// A document's sparse term counts, sorted by token id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "t")]
    slice: usize,
    counts: Vec<(u32, u32)>,
}

impl Document {
    /// Counts must be positive; ids are sorted and merged.
    pub fn new(slice: usize, counts: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut merged: Vec<(u32, u32)> = Vec::new();
        let mut raw: Vec<(u32, u32)> = counts.into_iter().collect();
        raw.sort_unstable_by_key(|&(id, _)| id);
        for (id, c) in raw {
            if c == 0 {
                return Err(Error::Input(format!("zero count for token id {id}")));
            }
            match merged.last_mut() {
                Some((last, total)) if *last == id => *total += c,
                _ => merged.push((id, c)),
            }
        }
        if merged.is_empty() {
            return Err(Error::Input("document has no tokens".into()));
        }
        Ok(Self {
            slice,
            counts: merged,
        })
    }

    pub fn slice(&self) -> usize {
        self.slice
    }

    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    pub fn token_total(&self) -> u32 {
        self.counts.iter().map(|&(_, c)| c).sum()
    }

    /// Dense relative-frequency vector of length `vocab_size`.
    pub fn normalized(&self, vocab_size: usize) -> Vec<f64> {
        normalized_counts(&self.counts, vocab_size)
    }
}

pub fn normalized_counts(counts: &[(u32, u32)], vocab_size: usize) -> Vec<f64> {
    let total: u32 = counts.iter().map(|&(_, c)| c).sum();
    let mut v = vec![0.0; vocab_size];
    if total == 0 {
        return v;
    }
    for &(id, c) in counts {
        v[id as usize] = f64::from(c) / f64::from(total);
    }
    v
}

/// Position of a document inside a [`CorpusSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocRef {
    pub slice: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSequence {
    vocabulary: Vocabulary,
    slices: Vec<Vec<Document>>,
    slice_bow: Vec<Vec<f64>>,
}

impl CorpusSequence {
    /// Validates ids and slice positions; `slice_bow` is computed from every document.
    pub fn new(vocabulary: Vocabulary, slices: Vec<Vec<Document>>) -> Result<Self> {
        if slices.len() < 2 {
            return Err(Error::Input(format!(
                "need at least 2 time slices, got {}",
                slices.len()
            )));
        }
        let v = vocabulary.len() as u32;
        for (t, docs) in slices.iter().enumerate() {
            for d in docs {
                if d.slice != t {
                    return Err(Error::Input(format!(
                        "document tagged with slice {} stored in slice {t}",
                        d.slice
                    )));
                }
                if let Some(&(id, _)) = d.counts.iter().find(|&&(id, _)| id >= v) {
                    return Err(Error::Input(format!(
                        "token id {id} outside vocabulary of size {v}"
                    )));
                }
            }
        }
        let mut corpus = Self {
            vocabulary,
            slices,
            slice_bow: Vec::new(),
        };
        corpus.slice_bow = corpus.aggregate(|_| true);
        Ok(corpus)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &[Vec<Document>] {
        &self.slices
    }

    pub fn slice_sizes(&self) -> Vec<usize> {
        self.slices.iter().map(Vec::len).collect()
    }

    pub fn num_documents(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn doc(&self, r: DocRef) -> &Document {
        &self.slices[r.slice][r.index]
    }

    pub fn doc_refs(&self) -> impl Iterator<Item = DocRef> + '_ {
        self.slices.iter().enumerate().flat_map(|(slice, docs)| {
            (0..docs.len()).map(move |index| DocRef { slice, index })
        })
    }

    /// Per-slice relative term frequencies; all-zero rows for empty slices.
    pub fn slice_bow(&self) -> &[Vec<f64>] {
        &self.slice_bow
    }

    /// Recompute `slice_bow` from the training documents of `split`.
    pub fn with_training_aggregate(mut self, split: &SplitSpec) -> Result<Self> {
        split.check_matches(&self)?;
        self.slice_bow = self.aggregate(|r| split.role(r) == Role::Train);
        Ok(self)
    }

    fn aggregate(&self, include: impl Fn(DocRef) -> bool) -> Vec<Vec<f64>> {
        let v = self.vocab_size();
        self.slices
            .iter()
            .enumerate()
            .map(|(slice, docs)| {
                let mut acc = vec![0.0; v];
                for (index, d) in docs.iter().enumerate() {
                    if !include(DocRef { slice, index }) {
                        continue;
                    }
                    for &(id, c) in &d.counts {
                        acc[id as usize] += f64::from(c);
                    }
                }
                let total: f64 = acc.iter().sum();
                if total > 0.0 {
                    acc.iter_mut().for_each(|x| *x /= total);
                }
                acc
            })
            .collect()
    }

    /// Expand back into records, one timestamp per slice (`origin + t * width`).
    pub fn to_records(&self, origin: i64, width: i64) -> Vec<Record> {
        self.doc_refs()
            .map(|r| {
                let d = self.doc(r);
                let tokens = d
                    .counts
                    .iter()
                    .flat_map(|&(id, c)| {
                        std::iter::repeat_n(self.vocabulary.tokens[id as usize].clone(), c as usize)
                    })
                    .collect();
                Record {
                    timestamp: origin + r.slice as i64 * width,
                    tokens,
                }
            })
            .collect()
    }
}
