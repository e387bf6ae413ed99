use std::path::Path;

use ndftm::diffcore::Tensor;
use ndftm::genmodel::{LatentTrajectory, ModelHyperParams, SynthOptions};
use ndftm::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TRUTH_FORMAT: &str = "ndftm-truth";
pub const TRUTH_VERSION: u32 = 1;

/// Ground truth of a synthetic corpus: the generating hyperparameters, the
/// topic-word matrix and every latent trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format: String,
    pub version: u32,
    pub hyper: ModelHyperParams,
    pub synth: SynthOptions,
    /// `K x V`
    pub beta: Vec<Vec<f64>>,
    pub latents: LatentTrajectory,
}

impl GroundTruth {
    pub fn new(hyper: ModelHyperParams, synth: SynthOptions, beta: &Tensor, latents: LatentTrajectory) -> Self {
        Self {
            format: TRUTH_FORMAT.into(),
            version: TRUTH_VERSION,
            hyper,
            synth,
            beta: beta.to_rows(),
            latents,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("ground truth serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if t.format != TRUTH_FORMAT {
            return Err(Error::format(path, format!("not a ground-truth file (`{}`)", t.format)));
        }
        if t.version != TRUTH_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: ground-truth version {} (expected {TRUTH_VERSION})",
                path.display(),
                t.version
            )));
        }
        Ok(t)
    }

    pub fn beta(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.beta)
    }
}
