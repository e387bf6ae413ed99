//! Evidence lower bound and the optimization loop.

mod elbo;
mod manifest;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use elbo::{
    elbo_batch, kl_bernoulli, kl_gaussian_diag, stratified_batches, Batch, ElboBreakdown, ElboSettings,
    NoiseKey,
};
pub use manifest::{sha256_hex, CheckpointEntry, RunManifest, CHECKPOINT_DIR, MANIFEST_FILE, RUN_FORMAT, RUN_VERSION};

use crate::corpus::{CorpusSequence, DocRef, Role, SplitSpec};
use crate::diffcore::{adam_step, AdamConfig, ParameterStore, StepOutcome, Tape};
use crate::error::{Error, Result};
use crate::genmodel::{GenerativeParams, ModelHyperParams};
use crate::inference::{register_encoder, Relaxation};
use crate::rng::stream;

/// Consecutive non-finite batches tolerated before training aborts.
pub const MAX_BAD_BATCHES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Per-epoch exponential decay rate of the temperature.
    pub tau_decay: f64,
    pub kl_warmup_epochs: f64,
    /// Monte Carlo draws per step.
    pub samples: usize,
    pub straight_through: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; zero keeps only the best and last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 2.0,
            tau_start: 1.0,
            tau_end: 0.3,
            tau_decay: 0.1,
            kl_warmup_epochs: 10.0,
            samples: 1,
            straight_through: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("epochs, batch_size and samples must be at least 1".into()));
        }
        if self.tau_end > self.tau_start {
            return Err(Error::Config("tau_end must not exceed tau_start".into()));
        }
        if self.tau_decay < 0.0 || self.kl_warmup_epochs < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("tau_decay, kl_warmup_epochs and clip_norm must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Temperature and KL weight at optimizer step `step`.
pub fn anneal(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let epoch = step as f64 / steps_per_epoch.max(1) as f64;
    let tau = (cfg.tau_start * (-cfg.tau_decay * epoch).exp()).max(cfg.tau_end);
    let kl_scale = if cfg.kl_warmup_epochs > 0.0 {
        (epoch / cfg.kl_warmup_epochs).min(1.0)
    } else {
        1.0
    };
    (tau, kl_scale)
}

/// Fresh generative and encoder parameters.
pub fn init_parameters(hyper: &ModelHyperParams, seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    GenerativeParams::init(hyper, seed)?.insert_into(&mut store)?;
    register_encoder(&mut store, hyper, seed)?;
    Ok(store)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub elbo: ElboBreakdown,
    pub tau: f64,
    pub kl_scale: f64,
    pub wall_ms: u64,
}

/// Passed to the observer after every epoch.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub records: &'a [EpochRecord],
    pub store: &'a ParameterStore,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation bound.
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub last: ParameterStore,
    pub records: Vec<EpochRecord>,
    /// Loss of every applied or skipped step, in order.
    pub step_losses: Vec<f64>,
}

/// Training documents grouped by slice.
fn grouped(split: &SplitSpec, role: Role, slices: usize) -> Vec<Vec<DocRef>> {
    let mut out = vec![Vec::new(); slices];
    for d in split.docs(role) {
        out[d.slice].push(d);
    }
    out
}

/// Full-data bound on `docs` without gradients.
pub fn evaluate_elbo(
    store: &ParameterStore,
    hyper: &ModelHyperParams,
    corpus: &CorpusSequence,
    docs: Vec<DocRef>,
    settings: &ElboSettings,
    noise: NoiseKey,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let (_, b) = elbo_batch(&mut tape, store, hyper, corpus, &Batch::full(docs), settings, noise)?;
    Ok(b)
}

/// Maximize the bound with Adam over stratified minibatches. `corpus` must
/// carry the training aggregate of `split`. The observer sees every epoch
/// and may persist checkpoints.
pub fn train(
    corpus: &CorpusSequence,
    split: &SplitSpec,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    cfg.validate()?;
    split.check_matches(corpus)?;
    let store = init_parameters(hyper, cfg.seed)?;
    train_from(store, corpus, split, hyper, cfg, observer)
}

/// As [`train`], starting from given parameters.
pub fn train_from(
    mut store: ParameterStore,
    corpus: &CorpusSequence,
    split: &SplitSpec,
    hyper: &ModelHyperParams,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    let train_docs = grouped(split, Role::Train, corpus.num_slices());
    let n_train: usize = train_docs.iter().map(Vec::len).sum();
    if n_train == 0 {
        return Err(Error::Input("no training documents".into()));
    }
    let valid_docs = split.docs(Role::Valid);
    let adam = cfg.adam();
    let mut records = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut bad_streak = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = stream(cfg.seed, &[0x7261_696e, epoch as u64]);
        let batches = stratified_batches(&train_docs, cfg.batch_size, &mut rng);
        let mut parts = Vec::with_capacity(batches.len());
        let (mut tau, mut kl_scale) = (cfg.tau_start, 0.0);
        for batch in &batches {
            let step = step_losses.len() as u64;
            (tau, kl_scale) = anneal(step, batches.len(), cfg);
            let settings = ElboSettings {
                relax: Relaxation {
                    tau,
                    straight_through: cfg.straight_through,
                },
                kl_scale,
                samples: cfg.samples,
            };
            let mut tape = Tape::new();
            let noise = NoiseKey { seed: cfg.seed, step };
            let (objective, breakdown) = elbo_batch(&mut tape, &store, hyper, corpus, batch, &settings, noise)?;
            let loss = tape.scale(objective, -1.0 / n_train as f64)?;
            let loss_value = tape.value(loss).item();
            step_losses.push(loss_value);
            if !loss_value.is_finite() || !breakdown.is_finite() {
                bad_streak += 1;
                log::warn!("epoch {epoch}: non-finite loss, batch skipped ({breakdown:?})");
                if bad_streak >= MAX_BAD_BATCHES {
                    return Err(Error::Divergence(format!(
                        "{bad_streak} consecutive non-finite batches at epoch {epoch}; last breakdown {breakdown:?}"
                    )));
                }
                continue;
            }
            let grads = tape.backward(loss, &store)?;
            match adam_step(&mut store, &grads, &adam)? {
                StepOutcome::Applied { .. } => bad_streak = 0,
                StepOutcome::Skipped => {
                    bad_streak += 1;
                    if bad_streak >= MAX_BAD_BATCHES {
                        return Err(Error::Divergence(format!(
                            "{bad_streak} consecutive non-finite gradients at epoch {epoch}"
                        )));
                    }
                }
            }
            parts.push(breakdown);
        }
        let wall_ms = started.elapsed().as_millis() as u64;
        let mut epoch_records = vec![EpochRecord {
            epoch,
            split: "train".into(),
            elbo: ElboBreakdown::mean(&parts),
            tau,
            kl_scale,
            wall_ms,
        }];

        let eval_settings = ElboSettings {
            relax: Relaxation {
                tau,
                straight_through: cfg.straight_through,
            },
            kl_scale: 1.0,
            samples: 1,
        };
        let valid_noise = NoiseKey {
            seed: cfg.seed ^ 0x0076_616c_6964,
            step: 0,
        };
        let criterion = if valid_docs.is_empty() {
            epoch_records[0].elbo.total
        } else {
            let v = evaluate_elbo(&store, hyper, corpus, valid_docs.clone(), &eval_settings, valid_noise)?;
            epoch_records.push(EpochRecord {
                epoch,
                split: "valid".into(),
                elbo: v,
                tau,
                kl_scale: 1.0,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            v.total
        };
        let improved = criterion.is_finite() && best.as_ref().is_none_or(|(b, _, _)| criterion > *b);
        if improved {
            best = Some((criterion, epoch, store.clone()));
        }
        for r in &epoch_records {
            log::info!(
                "epoch {epoch} {}: total {:.3} recon {:.3} kl {:.3} tau {:.3} kl_scale {:.3}",
                r.split,
                r.elbo.total,
                r.elbo.recon,
                r.elbo.kl_sum(),
                r.tau,
                r.kl_scale
            );
        }
        observer(&EpochReport {
            epoch,
            records: &epoch_records,
            store: &store,
            improved,
        })?;
        records.extend(epoch_records);
    }
    let (_, best_epoch, best) = best.unwrap_or_else(|| (f64::NAN, cfg.epochs, store.clone()));
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: store,
        records,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split;
    use crate::diffcore::{gradient_check, GradCheckOptions};
    use crate::genmodel::{sample_corpus, SynthOptions};

    #[test]
    fn anneal_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(anneal(0, 10, &cfg), (1.0, 0.0));
        let (_, s) = anneal(100, 10, &cfg);
        assert_eq!(s, 1.0);
        let (_, s) = anneal(500, 10, &cfg);
        assert_eq!(s, 1.0);
        let taus: Vec<f64> = (0..1000).map(|s| anneal(s, 10, &cfg).0).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*taus.last().unwrap(), 0.3);
        let none = TrainConfig {
            kl_warmup_epochs: 0.0,
            ..cfg
        };
        assert_eq!(anneal(0, 10, &none).1, 1.0);
    }

    fn small_run() -> (CorpusSequence, SplitSpec, ModelHyperParams) {
        let hyper = ModelHyperParams {
            num_topics: 5,
            vocab_size: 20,
            embedding_dim: 3,
            dim_xi: 2,
            dim_eta: 2,
            transition_hidden: 3,
            encoder_hidden: 4,
            posterior_hidden: 6,
            ..Default::default()
        };
        let opts = SynthOptions {
            num_slices: 3,
            docs_per_slice: 2,
            tokens_per_doc: 15,
            seed: 2,
            ..Default::default()
        };
        let (corpus, _) = sample_corpus(&hyper, &opts.ground_truth(&hyper).unwrap(), &opts).unwrap();
        let split = split(&corpus, [1.0, 0.0, 0.0], 0).unwrap();
        let corpus = corpus.with_training_aggregate(&split).unwrap();
        (corpus, split, hyper)
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let (corpus, _, hyper) = small_run();
        for h in [
            hyper.clone(),
            ModelHyperParams { coupled: true, ..hyper.clone() },
            ModelHyperParams { linear_transition: true, bidirectional_encoder: true, ..hyper.clone() },
        ] {
            let store = init_parameters(&h, 3).unwrap();
            let settings = ElboSettings {
                relax: Relaxation { tau: 0.8, straight_through: false },
                kl_scale: 0.7,
                samples: 2,
            };
            let batch = Batch::full(corpus.doc_refs().collect());
            let report = gradient_check(
                |s| {
                    let mut tape = Tape::new();
                    let (obj, _) = elbo_batch(&mut tape, s, &h, &corpus, &batch, &settings, NoiseKey { seed: 5, step: 1 })?;
                    Ok((tape, obj))
                },
                &store,
                &GradCheckOptions { epsilon: 1e-4, floor: 1e-5, max_coordinates: usize::MAX, ..Default::default() },
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{h:?}: {report:?}");
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (corpus, split, hyper) = small_run();
        let cfg = TrainConfig { epochs: 4, batch_size: 2, seed: 7, ..Default::default() };
        let a = train(&corpus, &split, &hyper, &cfg, &mut |_| Ok(())).unwrap();
        let b = train(&corpus, &split, &hyper, &cfg, &mut |_| Ok(())).unwrap();
        assert!(a.step_losses.len() >= 10);
        let bits = |o: &TrainOutcome| o.step_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.last, b.last);
        let c = train(&corpus, &split, &hyper, &TrainConfig { seed: 8, ..cfg }, &mut |_| Ok(())).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn observer_sees_every_epoch_and_errors_propagate() {
        let (corpus, split, hyper) = small_run();
        let cfg = TrainConfig { epochs: 3, batch_size: 3, ..Default::default() };
        let mut seen = Vec::new();
        let out = train(&corpus, &split, &hyper, &cfg, &mut |r| {
            seen.push((r.epoch, r.records.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 1), (2, 1), (3, 1)]);
        assert_eq!(out.records.len(), 3);
        let err = train(&corpus, &split, &hyper, &cfg, &mut |_| Err(Error::Input("stop".into())));
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { tau_end: 2.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
