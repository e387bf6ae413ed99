use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::diffcore::ParameterStore;
use crate::error::{Error, Result};
use crate::genmodel::ModelHyperParams;

pub const RUN_FORMAT: &str = "ndftm-run";
pub const RUN_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// Relative to the run directory.
    pub file: String,
    pub epoch: usize,
    pub sha256: String,
}

/// Everything needed to reload a training run and check that later
/// commands use the same corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub hyper: ModelHyperParams,
    pub train: TrainConfig,
    pub config_hash: String,
    pub corpus_hash: String,
    pub corpus_path: Option<PathBuf>,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    /// Keyed by checkpoint name: `best`, `last`, `epoch-0005`, ...
    pub checkpoints: BTreeMap<String, CheckpointEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(hyper: ModelHyperParams, train: TrainConfig, config_hash: String, corpus_hash: String) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            hyper,
            train,
            config_hash,
            corpus_hash,
            corpus_path: None,
            epochs_completed: 0,
            best_epoch: None,
            checkpoints: BTreeMap::new(),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != RUN_FORMAT {
            return Err(Error::format(&path, format!("expected format {RUN_FORMAT:?}, found {:?}", m.format)));
        }
        if m.version != RUN_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: run manifest version {} is not supported (expected {RUN_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    /// Write `store` as checkpoint `name` and record its hash.
    pub fn record_checkpoint(&mut self, run_dir: &Path, name: &str, epoch: usize, store: &ParameterStore) -> Result<()> {
        let dir = run_dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file = format!("{CHECKPOINT_DIR}/{name}.ckpt");
        let bytes = store.to_bytes();
        let path = run_dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.checkpoints.insert(
            name.to_owned(),
            CheckpointEntry {
                file,
                epoch,
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Load checkpoint `name`, refusing files whose hash differs from the manifest.
    pub fn load_checkpoint(&self, run_dir: &Path, name: &str) -> Result<ParameterStore> {
        let entry = self.checkpoints.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.checkpoints.keys().map(String::as_str).collect();
            Error::Config(format!("run has no checkpoint {name:?}; available: {}", known.join(", ")))
        })?;
        let path = run_dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Compatibility(format!(
                "{} does not match the hash recorded in the run manifest",
                path.display()
            )));
        }
        ParameterStore::from_bytes(&bytes, &path)
    }

    pub fn check_corpus(&self, corpus_hash: &str) -> Result<()> {
        if corpus_hash != self.corpus_hash {
            return Err(Error::Compatibility(format!(
                "corpus hash {corpus_hash} differs from the one the run was trained on ({})",
                self.corpus_hash
            )));
        }
        Ok(())
    }
}
