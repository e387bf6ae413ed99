use std::path::{Path, PathBuf};

use ndftm::corpus::InputFormat;
use ndftm::evaluation::EvalOptions;
use ndftm::genmodel::{ModelHyperParams, SynthOptions};
use ndftm::training::{sha256_hex, TrainConfig};
use ndftm::{Error, Result};
use serde::{Deserialize, Serialize};

/// Declarative run configuration. Every section is optional in the file;
/// command-line flags override file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, seeds every stage (split, synthesis, training, evaluation).
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    pub threads: Option<usize>,
    pub input: InputSection,
    pub ingest: IngestSection,
    pub split: SplitSection,
    pub model: ModelHyperParams,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub synth: SynthOptions,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    /// Raw records for `ingest`.
    pub records: Option<PathBuf>,
    pub format: InputFormat,
    /// Corpus bundle for `split`, `train`, `eval`, `predict` and `diagnose`.
    pub corpus: Option<PathBuf>,
    /// Training run directory for `eval`, `predict` and `diagnose`.
    pub run: Option<PathBuf>,
    /// Which checkpoint of the run to load.
    pub checkpoint: String,
    /// Ground-truth sidecar written by `synth`, for `diagnose`.
    pub truth: Option<PathBuf>,
    /// One stopword per line.
    pub stopwords: Option<PathBuf>,
}

impl Default for InputSection {
    fn default() -> Self {
        Self {
            records: None,
            format: InputFormat::Auto,
            corpus: None,
            run: None,
            checkpoint: "best".into(),
            truth: None,
            stopwords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    /// Width of a time slice in timestamp units; ignored when boundaries are given.
    pub slice_width: i64,
    pub origin: Option<i64>,
    pub boundaries: Option<Vec<i64>>,
    pub min_count: u64,
    pub max_doc_fraction: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            slice_width: 1,
            origin: None,
            boundaries: None,
            min_count: 1,
            max_doc_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Train, validation and test shares.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Defaults to the command name and a hash of the effective configuration.
    pub run_id: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Push the top-level seed into every stage.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.split.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
            self.synth.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// `<dir>/<run-id>`, creating it. The default run id is
    /// `<command>-<first 12 hex digits of the config hash>`.
    pub fn run_dir(&mut self, command: &str) -> Result<PathBuf> {
        let id = match &self.output.run_id {
            Some(id) => id.clone(),
            None => format!("{command}-{}", &self.hash()[..12]),
        };
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(Error::Config(format!("run id {id:?} must be a plain directory name")));
        }
        self.output.run_id = Some(id.clone());
        let dir = self.output.dir.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Write the effective configuration next to the outputs.
    pub fn write_effective(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut c = RunConfig::default();
        c.model.num_topics = 7;
        c.eval.metrics = vec![ndftm::evaluation::Metric::Tc];
        c.input.corpus = Some("a/b.json".into());
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\ntopics = 3", "[train]\nepoch = 2", "[nope]\n"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let c = RunConfig::parse("seed = 4\n[model]\nnum_topics = 12\n").unwrap();
        assert_eq!(c.model.num_topics, 12);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig {
            seed: Some(9),
            ..Default::default()
        };
        c.resolve_seed();
        assert_eq!((c.split.seed, c.train.seed, c.eval.seed, c.synth.seed), (9, 9, 9, 9));
    }
}
