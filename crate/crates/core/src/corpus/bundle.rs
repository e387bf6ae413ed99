use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusSequence, SplitSpec};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT: &str = "ndftm-corpus";
pub const BUNDLE_VERSION: u32 = 1;

/// Serialized corpus plus an optional split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub format: String,
    pub version: u32,
    pub corpus: CorpusSequence,
    pub split: Option<SplitSpec>,
}

impl CorpusBundle {
    pub fn new(corpus: CorpusSequence, split: Option<SplitSpec>) -> Result<Self> {
        let corpus = match &split {
            Some(s) => corpus.with_training_aggregate(s)?,
            None => corpus,
        };
        Ok(Self {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            corpus,
            split,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Input(format!("serializing bundle: {e}")))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let b: Self = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if b.format != BUNDLE_FORMAT {
            return Err(Error::format(origin, format!("not a corpus bundle (`{}`)", b.format)));
        }
        if b.version != BUNDLE_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: bundle version {} (expected {BUNDLE_VERSION})",
                origin.display(),
                b.version
            )));
        }
        let rebuilt = CorpusSequence::new(b.corpus.vocabulary.clone(), b.corpus.slices.clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        if let Some(s) = &b.split {
            s.check_matches(&rebuilt)
                .map_err(|e| Error::format(origin, e.to_string()))?;
        }
        let v = rebuilt.vocab_size();
        if b.corpus.slice_bow.len() != rebuilt.num_slices()
            || b.corpus.slice_bow.iter().any(|r| r.len() != v)
        {
            return Err(Error::format(origin, "slice_bow shape does not match corpus"));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn split(&self) -> Result<&SplitSpec> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Input("corpus bundle has no split; run `split` first".into()))
    }
}
