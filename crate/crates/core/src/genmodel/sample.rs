use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{topic_proportions, GenerativeParams, ModelHyperParams, TransitionNet};
use crate::corpus::{CorpusSequence, Document, Vocabulary};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::normal_tensor;
use crate::rng::{normals, stream};

const MASK_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentLatents {
    pub zeta: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Ground-truth latent states of a sampled corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    /// `T x dim_xi`; empty rows in coupled mode.
    pub xi: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    /// `T x K`
    pub pi: Vec<Vec<f64>>,
    /// Per slice, per document.
    pub docs: Vec<Vec<DocumentLatents>>,
    /// Documents whose mask stayed empty after resampling and had the most
    /// probable topic switched on.
    pub forced_masks: usize,
}

/// Shape of a synthetic corpus and how its ground-truth parameters look.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub num_slices: usize,
    pub docs_per_slice: usize,
    pub tokens_per_doc: usize,
    /// Spread of the activity biases: topic `k` gets
    /// `skew * (2k / (K - 1) - 1)`, so some topics are rare and some common.
    pub skew: f64,
    /// Scale of topic-embedding entries; larger gives peakier topics.
    pub topic_sharpness: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            num_slices: 12,
            docs_per_slice: 100,
            tokens_per_doc: 60,
            skew: 0.0,
            topic_sharpness: 3.0,
            seed: 0,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_slices < 2 || self.docs_per_slice == 0 || self.tokens_per_doc == 0 {
            return Err(Error::Config(
                "synthetic corpus needs at least 2 slices, 1 document per slice and 1 token per document".into(),
            ));
        }
        if !self.skew.is_finite() || !(self.topic_sharpness > 0.0) {
            return Err(Error::Config("skew must be finite and topic_sharpness positive".into()));
        }
        Ok(())
    }

    /// Ground-truth parameters: peaked topics, activity biases spread by
    /// `skew`, small residual transition networks.
    pub fn ground_truth(&self, hyper: &ModelHyperParams) -> Result<GenerativeParams> {
        hyper.validate()?;
        self.validate()?;
        let seed = self.seed ^ 0x005e_ed0f_7e57;
        let (k, e) = (hyper.num_topics, hyper.embedding_dim);
        let mut p = GenerativeParams::init(hyper, seed)?;
        p.alpha = normal_tensor(seed, "truth.alpha", &[k, e], self.topic_sharpness / (e as f64).sqrt());
        p.rho = normal_tensor(seed, "truth.rho", &[hyper.vocab_size, e], 1.0);
        let net = |name: &str, dim: usize| {
            let mut n = TransitionNet::zeros(dim, hyper.transition_hidden);
            n.w1 = normal_tensor(seed, &format!("{name}.w1"), &[dim, hyper.transition_hidden], 1.0 / (dim as f64).sqrt());
            n.w2 = normal_tensor(
                seed,
                &format!("{name}.w2"),
                &[hyper.transition_hidden, dim],
                0.3 / (hyper.transition_hidden as f64).sqrt(),
            );
            n
        };
        if p.trans_xi.is_some() {
            p.trans_xi = Some(net("truth.trans_xi", hyper.dim_xi));
        }
        if p.trans_eta.is_some() {
            p.trans_eta = Some(net("truth.trans_eta", hyper.dim_eta));
        }
        if p.c_xi.is_some() {
            let c = (0..k)
                .map(|i| self.skew * (2.0 * i as f64 / (k - 1) as f64 - 1.0))
                .collect();
            p.c_xi = Some(Tensor::vector(c));
        }
        Ok(p)
    }
}

/// Ancestral sampling: global chains, then per document a hard mask,
/// proportion logits, topic assignments and words.
pub fn sample_corpus(
    hyper: &ModelHyperParams,
    params: &GenerativeParams,
    opts: &SynthOptions,
) -> Result<(CorpusSequence, LatentTrajectory)> {
    hyper.validate()?;
    opts.validate()?;
    let (k, v) = (hyper.num_topics, hyper.vocab_size);
    let beta = params.beta()?;
    let topic_words: Vec<WeightedIndex<f64>> = (0..k)
        .map(|i| WeightedIndex::new(beta.row_slice(i)).map_err(|e| Error::Input(format!("topic {i}: {e}"))))
        .collect::<Result<_>>()?;

    let mut chain = stream(opts.seed, &[0]);
    let draw = |prior: super::Gaussian, rng: &mut crate::rng::StreamRng| -> Vec<f64> {
        let z = normals(rng, prior.mean.len());
        prior
            .mean
            .iter()
            .zip(&prior.var)
            .zip(z)
            .map(|((m, s2), z)| m + s2.sqrt() * z)
            .collect()
    };

    let mut traj = LatentTrajectory {
        xi: Vec::new(),
        eta: Vec::new(),
        pi: Vec::new(),
        docs: Vec::new(),
        forced_masks: 0,
    };
    let mut slices = Vec::with_capacity(opts.num_slices);
    for t in 0..opts.num_slices {
        let xi = if hyper.coupled {
            Vec::new()
        } else {
            let prev = traj.xi.last().map(Vec::as_slice);
            draw(params.prior_xi(prev, hyper.dim_xi, hyper.delta)?, &mut chain)
        };
        let eta = {
            let prev = traj.eta.last().map(Vec::as_slice);
            draw(params.prior_eta(prev, hyper.dim_eta, hyper.delta)?, &mut chain)
        };
        let pi = params.activity(&xi, hyper.alpha0)?;
        let zeta_prior = params.zeta_prior(&eta)?;

        let mut docs = Vec::with_capacity(opts.docs_per_slice);
        let mut latents = Vec::with_capacity(opts.docs_per_slice);
        for d in 0..opts.docs_per_slice {
            let mut rng = stream(opts.seed, &[1, t as u64, d as u64]);
            let (b, forced) = sample_mask(&pi, &mut rng);
            traj.forced_masks += usize::from(forced);
            let zeta = draw(zeta_prior.clone(), &mut rng);
            let (theta, _) = topic_proportions(&b, &zeta);
            let topic_pick = WeightedIndex::new(&theta).map_err(|e| Error::Input(e.to_string()))?;
            let mut counts = vec![0u32; v];
            for _ in 0..opts.tokens_per_doc {
                let z = topic_pick.sample(&mut rng);
                counts[topic_words[z].sample(&mut rng)] += 1;
            }
            let sparse = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(w, &c)| (w as u32, c));
            docs.push(Document::new(t, sparse)?);
            latents.push(DocumentLatents { zeta, b, theta });
        }
        slices.push(docs);
        traj.docs.push(latents);
        traj.xi.push(xi);
        traj.eta.push(eta);
        traj.pi.push(pi);
    }
    if traj.forced_masks > 0 {
        log::info!(
            "{} document mask(s) stayed empty after {MASK_RETRIES} draws; forced the most probable topic on",
            traj.forced_masks
        );
    }
    let corpus = CorpusSequence::new(Vocabulary::synthetic(v)?, slices)?;
    Ok((corpus, traj))
}

/// Hard Bernoulli mask, redrawn while empty; after the retry budget the
/// most probable topic is switched on.
pub(crate) fn sample_mask(pi: &[f64], rng: &mut impl Rng) -> (Vec<f64>, bool) {
    for _ in 0..MASK_RETRIES {
        let b: Vec<f64> = pi
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        if b.iter().any(|&x| x > 0.0) {
            return (b, false);
        }
    }
    let best = pi
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > pi[best] { i } else { best });
    let mut b = vec![0.0; pi.len()];
    b[best] = 1.0;
    (b, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> ModelHyperParams {
        ModelHyperParams {
            num_topics: 4,
            vocab_size: 30,
            embedding_dim: 4,
            dim_xi: 2,
            dim_eta: 2,
            transition_hidden: 4,
            alpha0: 0.9,
            ..Default::default()
        }
    }

    fn opts() -> SynthOptions {
        SynthOptions {
            num_slices: 3,
            docs_per_slice: 20,
            tokens_per_doc: 15,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let h = hyper();
        let p = opts().ground_truth(&h).unwrap();
        let a = sample_corpus(&h, &p, &opts()).unwrap();
        let b = sample_corpus(&h, &p, &opts()).unwrap();
        assert_eq!(a, b);
        let c = sample_corpus(&h, &p, &SynthOptions { seed: 12, ..opts() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn theta_support_within_mask_and_pi_below_ceiling() {
        let h = hyper();
        let p = opts().ground_truth(&h).unwrap();
        let (c, tr) = sample_corpus(&h, &p, &opts()).unwrap();
        assert_eq!(c.slice_sizes(), vec![20; 3]);
        for row in &tr.pi {
            assert!(row.iter().all(|&x| x > 0.0 && x < h.alpha0));
        }
        for d in tr.docs.iter().flatten() {
            assert!(d.b.iter().any(|&x| x == 1.0));
            for (bk, tk) in d.b.iter().zip(&d.theta) {
                if *bk == 0.0 {
                    assert_eq!(*tk, 0.0);
                }
            }
            assert!((d.theta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for docs in c.slices() {
            assert!(docs.iter().all(|d| d.token_total() == 15));
        }
    }

    #[test]
    fn saturated_activity_switches_every_topic_on() {
        let h = ModelHyperParams { alpha0: 1.0, ..hyper() };
        let mut p = opts().ground_truth(&h).unwrap();
        p.c_xi = Some(Tensor::filled(&[4], 30.0));
        p.w_xi = Some(Tensor::zeros(&[2, 4]));
        let (_, tr) = sample_corpus(&h, &p, &opts()).unwrap();
        assert!(tr.docs.iter().flatten().all(|d| d.b.iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn forced_mask_picks_most_probable_topic() {
        let mut rng = stream(0, &[]);
        let (b, forced) = sample_mask(&[1e-300, 2e-300, 1e-300], &mut rng);
        assert!(forced);
        assert_eq!(b, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn skew_orders_activity_biases() {
        let h = hyper();
        let p = SynthOptions { skew: 2.0, ..opts() }.ground_truth(&h).unwrap();
        let c = p.c_xi.unwrap();
        assert_eq!(c.data().first(), Some(&-2.0));
        assert_eq!(c.data().last(), Some(&2.0));
    }
}
