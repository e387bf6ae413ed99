use serde::{Deserialize, Serialize};

use super::infer::{doc_posteriors, draw_theta, gaussian_draw, propagate_prior, sample_globals, TrainedModel};
use super::map_indices;
use crate::corpus::{completion_halves, normalized_counts, CorpusSequence, DocRef};
use crate::diffcore::{log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::genmodel::{doc_loglikelihood, sample_mask, topic_proportions};
use crate::rng::stream;

const PPL_GLOBAL: u64 = 0x5000;
const PPL_DOC: u64 = 0x5001;
const PNLL_GLOBAL: u64 = 0x5100;
const PNLL_DOC: u64 = 0x5101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub ppl_dc: f64,
    /// Total log-likelihood of the second halves.
    pub log_likelihood: f64,
    pub tokens: u64,
    pub documents: usize,
    /// Documents with fewer than two tokens.
    pub excluded: usize,
}

/// Log-mean-exp of each column of `draws` (rows are draws).
fn per_doc_log_mean_exp(draws: &[Vec<f64>], docs: usize) -> Vec<f64> {
    let ln_s = (draws.len() as f64).ln();
    (0..docs)
        .map(|i| {
            let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            log_sum_exp(&col) - ln_s
        })
        .collect()
}

/// Document-completion perplexity: the local posteriors see the first half
/// of each document and the second half is scored. Global chains come from
/// the corpus aggregate, which holds training documents only.
pub fn ppl_document_completion(
    model: &TrainedModel,
    corpus: &CorpusSequence,
    docs: &[DocRef],
    completion_seed: u64,
    samples: usize,
    seed: u64,
) -> Result<CompletionReport> {
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let v = corpus.vocab_size();
    let mut kept = Vec::new();
    let mut excluded = 0;
    for &d in docs {
        match completion_halves(corpus.doc(d), completion_seed) {
            Some(h) => kept.push((d, h)),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::info!("{excluded} document(s) with fewer than 2 tokens left out of completion perplexity");
    }
    if kept.is_empty() {
        return Err(Error::Input("no document with at least 2 tokens to complete".into()));
    }
    let inputs: Vec<(usize, Vec<f64>)> = kept
        .iter()
        .map(|(d, (first, _))| (d.slice, normalized_counts(first, v)))
        .collect();
    let draws = map_indices(samples, |s| {
        let path = sample_globals(model, corpus.slice_bow(), Some(&mut stream(seed, &[PPL_GLOBAL, s as u64])))?;
        let posts = doc_posteriors(model, &path, &inputs)?;
        Ok(kept
            .iter()
            .zip(&posts)
            .map(|((d, (_, second)), p)| {
                let mut rng = stream(seed, &[PPL_DOC, s as u64, d.slice as u64, d.index as u64]);
                let (theta, _) = draw_theta(p, &mut rng);
                doc_loglikelihood(&theta, &model.log_beta, second).0
            })
            .collect::<Vec<f64>>())
    })?;
    let log_likelihood: f64 = per_doc_log_mean_exp(&draws, kept.len()).iter().sum();
    let tokens: u64 = kept
        .iter()
        .map(|(_, (_, second))| second.iter().map(|&(_, c)| u64::from(c)).sum::<u64>())
        .sum();
    Ok(CompletionReport {
        ppl_dc: (-log_likelihood / tokens as f64).exp(),
        log_likelihood,
        tokens,
        documents: kept.len(),
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveReport {
    /// Negative predictive log-likelihood per token.
    pub p_nll: f64,
    pub tokens: u64,
    pub documents: usize,
    pub target_slice: usize,
    pub horizon: usize,
}

/// Predictive negative log-likelihood of documents in one slice. The chains
/// are inferred from the slices up to `target - horizon` and carried
/// `horizon` steps forward through the prior; masks and proportion logits
/// are drawn from their priors. Particles are averaged per document in
/// log space.
pub fn predictive_nll(
    model: &TrainedModel,
    corpus: &CorpusSequence,
    docs: &[DocRef],
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<PredictiveReport> {
    if samples == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("prediction horizon must be at least 1".into()));
    }
    let target = match docs.first() {
        Some(d) => d.slice,
        None => return Err(Error::Input("no documents to predict".into())),
    };
    if docs.iter().any(|d| d.slice != target) {
        return Err(Error::Input("predicted documents must share one time slice".into()));
    }
    if target < horizon {
        return Err(Error::Config(format!(
            "horizon {horizon} leaves no observed slice before slice {target}"
        )));
    }
    let prefix = &corpus.slice_bow()[..target + 1 - horizon];
    let h = &model.hyper;
    let draws = map_indices(samples, |s| {
        let mut rng = stream(seed, &[PNLL_GLOBAL, s as u64]);
        let path = sample_globals(model, prefix, Some(&mut rng))?;
        let last = prefix.len() - 1;
        let (xi, eta) = propagate_prior(model, (&path.xi[last], &path.eta[last]), horizon, &mut rng)?;
        let pi = model.params.activity(&xi, h.alpha0)?;
        let zeta_prior = model.params.zeta_prior(&eta)?;
        Ok(docs
            .iter()
            .map(|d| {
                let mut rng = stream(seed, &[PNLL_DOC, s as u64, d.slice as u64, d.index as u64]);
                let zeta = gaussian_draw(&zeta_prior.mean, &zeta_prior.var, &mut rng);
                let theta = if h.coupled {
                    let mut t = zeta;
                    softmax_in_place(&mut t);
                    t
                } else {
                    topic_proportions(&sample_mask(&pi, &mut rng).0, &zeta).0
                };
                doc_loglikelihood(&theta, &model.log_beta, corpus.doc(*d).counts()).0
            })
            .collect::<Vec<f64>>())
    })?;
    let total: f64 = per_doc_log_mean_exp(&draws, docs.len()).iter().sum();
    let tokens: u64 = docs.iter().map(|&d| u64::from(corpus.doc(d).token_total())).sum();
    if tokens == 0 {
        return Err(Error::Input("predicted documents contain no tokens".into()));
    }
    Ok(PredictiveReport {
        p_nll: -total / tokens as f64,
        tokens,
        documents: docs.len(),
        target_slice: target,
        horizon,
    })
}
