use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSequence, DocRef};
use crate::diffcore::{ParameterStore, SparseRows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genmodel::{names as gen, ModelHyperParams, THETA_EPS};
use crate::inference::{
    encode_sequence, infer_chain, names as enc, posterior_b_logits, posterior_zeta, relaxed_bernoulli,
    reparam_gaussian, ChainSample, Relaxation,
};
use crate::nets::Mlp;
use crate::rng::{normals, open_uniforms, stream};

/// The seven terms of the evidence lower bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub kl_eta1: f64,
    pub kl_xi1: f64,
    pub kl_eta_seq: f64,
    pub kl_xi_seq: f64,
    pub kl_zeta: f64,
    pub kl_b: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_eta1 + self.kl_xi1 + self.kl_eta_seq + self.kl_xi_seq + self.kl_zeta + self.kl_b
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.kl_eta1,
            self.kl_xi1,
            self.kl_eta_seq,
            self.kl_xi_seq,
            self.kl_zeta,
            self.kl_b,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    fn scaled(self, c: f64) -> Self {
        Self {
            recon: self.recon * c,
            kl_eta1: self.kl_eta1 * c,
            kl_xi1: self.kl_xi1 * c,
            kl_eta_seq: self.kl_eta_seq * c,
            kl_xi_seq: self.kl_xi_seq * c,
            kl_zeta: self.kl_zeta * c,
            kl_b: self.kl_b * c,
            total: self.total * c,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            recon: self.recon + o.recon,
            kl_eta1: self.kl_eta1 + o.kl_eta1,
            kl_xi1: self.kl_xi1 + o.kl_xi1,
            kl_eta_seq: self.kl_eta_seq + o.kl_eta_seq,
            kl_xi_seq: self.kl_xi_seq + o.kl_xi_seq,
            kl_zeta: self.kl_zeta + o.kl_zeta,
            kl_b: self.kl_b + o.kl_b,
            total: self.total + o.total,
        }
    }

    /// Element-wise mean.
    pub fn mean(items: &[Self]) -> Self {
        let sum = items.iter().fold(Self::default(), |a, &b| a.plus(b));
        sum.scaled(1.0 / items.len().max(1) as f64)
    }
}

/// Closed-form `KL(N(mq, vq) || N(mp, vp))` summed over dimensions.
pub fn kl_gaussian_diag(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| 0.5 * ((vp[i] / vq[i]).ln() + (vq[i] + (mq[i] - mp[i]).powi(2)) / vp[i] - 1.0))
        .sum()
}

/// `sum_k q ln(q/p) + (1-q) ln((1-q)/(1-p))`.
pub fn kl_bernoulli(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&q, &p)| q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln())
        .sum()
}

/// Documents of one minibatch with their local-term weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub docs: Vec<DocRef>,
    pub weights: Vec<f64>,
}

impl Batch {
    /// Every document weighted once.
    pub fn full(docs: Vec<DocRef>) -> Self {
        let weights = vec![1.0; docs.len()];
        Self { docs, weights }
    }

    /// Weight each document by `population[t] / (batch documents in t)`, so
    /// the local terms estimate the sum over the whole population.
    pub fn reweighted(docs: Vec<DocRef>, population: &[usize]) -> Self {
        let mut in_batch = vec![0usize; population.len()];
        for d in &docs {
            in_batch[d.slice] += 1;
        }
        let weights = docs
            .iter()
            .map(|d| population[d.slice] as f64 / in_batch[d.slice] as f64)
            .collect();
        Self { docs, weights }
    }
}

/// Deal each slice's shuffled documents round-robin into batches: the number
/// of documents a slice contributes differs by at most one between batches.
///
/// Documents of a slice present in every batch are weighted
/// `N_t / (batch documents in t)`. A slice with fewer documents than there
/// are batches is weighted by the batch count instead; either way a
/// uniformly chosen batch of the epoch estimates the full sum without bias.
pub fn stratified_batches(by_slice: &[Vec<DocRef>], batch_size: usize, rng: &mut impl Rng) -> Vec<Batch> {
    let total: usize = by_slice.iter().map(Vec::len).sum();
    let count = total.div_ceil(batch_size.max(1)).max(1);
    let population: Vec<usize> = by_slice.iter().map(Vec::len).collect();
    let mut groups: Vec<Vec<DocRef>> = vec![Vec::new(); count];
    let mut offset = 0;
    for docs in by_slice {
        let mut docs = docs.clone();
        docs.shuffle(rng);
        for (i, d) in docs.iter().enumerate() {
            groups[(offset + i) % count].push(*d);
        }
        offset += docs.len();
    }
    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|mut g| {
            g.sort_unstable();
            let mut batch = Batch::reweighted(g, &population);
            for (d, w) in batch.docs.iter().zip(batch.weights.iter_mut()) {
                if population[d.slice] < count {
                    *w = count as f64;
                }
            }
            batch
        })
        .collect()
}

/// Identifies the random draws of one objective evaluation. Per-document
/// noise depends on the document, not on the batch it lands in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

const GLOBAL_STREAM: u64 = 1;
const LOCAL_STREAM: u64 = 2;

impl NoiseKey {
    fn global(&self, draw: usize, rows: usize, dim_xi: usize, dim_eta: usize) -> (Tensor, Tensor) {
        let mut rng = stream(self.seed, &[GLOBAL_STREAM, self.step, draw as u64]);
        let eta = Tensor::matrix(rows, dim_eta, normals(&mut rng, rows * dim_eta)).expect("shape");
        let xi = Tensor::matrix(rows, dim_xi, normals(&mut rng, rows * dim_xi)).expect("shape");
        (xi, eta)
    }

    fn local(&self, draw: usize, doc: DocRef, k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(
            self.seed,
            &[LOCAL_STREAM, self.step, draw as u64, doc.slice as u64, doc.index as u64],
        );
        (normals(&mut rng, k), open_uniforms(&mut rng, k))
    }
}

/// Everything fixed across the documents of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboSettings {
    pub relax: Relaxation,
    pub kl_scale: f64,
    /// Monte Carlo draws averaged per evaluation.
    pub samples: usize,
}

/// Build the objective `recon - kl_scale * KL`, averaged over draws, on
/// `tape`. Global terms cover every slice; local terms cover the batch
/// with its weights. Returns the objective node and its unscaled breakdown.
pub fn elbo_batch(
    tape: &mut Tape,
    store: &ParameterStore,
    hyper: &ModelHyperParams,
    corpus: &CorpusSequence,
    batch: &Batch,
    settings: &ElboSettings,
    noise: NoiseKey,
) -> Result<(Var, ElboBreakdown)> {
    if batch.docs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if settings.samples == 0 {
        return Err(Error::Config("Monte Carlo sample count must be at least 1".into()));
    }
    let encoded = encode_sequence(tape, store, hyper, corpus.slice_bow())?;
    let shared = Shared::build(tape, store, hyper, corpus, batch)?;
    let mut objective: Option<Var> = None;
    let mut parts = Vec::with_capacity(settings.samples);
    for draw in 0..settings.samples {
        let (obj, breakdown) = one_draw(tape, store, hyper, &shared, encoded, batch, settings, noise, draw)?;
        objective = Some(match objective {
            None => obj,
            Some(acc) => tape.add(acc, obj)?,
        });
        parts.push(breakdown);
    }
    let objective = tape.scale(objective.expect("at least one draw"), 1.0 / settings.samples as f64)?;
    Ok((objective, ElboBreakdown::mean(&parts)))
}

/// Batch-level tensors that do not depend on the Monte Carlo draw.
struct Shared {
    w_norm: Var,
    slices: Vec<usize>,
    counts: Arc<SparseRows>,
    weights: Var,
    log_beta: Var,
}

impl Shared {
    fn build(
        tape: &mut Tape,
        store: &ParameterStore,
        hyper: &ModelHyperParams,
        corpus: &CorpusSequence,
        batch: &Batch,
    ) -> Result<Self> {
        let v = hyper.vocab_size;
        if corpus.vocab_size() != v {
            return Err(Error::Compatibility(format!(
                "model vocabulary {v} does not match corpus vocabulary {}",
                corpus.vocab_size()
            )));
        }
        let docs: Vec<_> = batch.docs.iter().map(|&r| corpus.doc(r)).collect();
        let rows: Vec<Vec<f64>> = docs.iter().map(|d| d.normalized(v)).collect();
        let w_norm = tape.constant(Tensor::from_rows(&rows)?);
        let counts = Arc::new(SparseRows::new(
            docs.iter()
                .map(|d| d.counts().iter().map(|&(w, c)| (w as usize, f64::from(c))).collect())
                .collect(),
        ));
        let weights = tape.constant(Tensor::matrix(batch.weights.len(), 1, batch.weights.clone())?);
        let alpha = tape.param(store, gen::ALPHA)?;
        let rho = tape.param(store, gen::RHO)?;
        let logits = tape.matmul_nt(alpha, rho)?;
        let log_beta = tape.log_softmax(logits)?;
        Ok(Self {
            w_norm,
            slices: batch.docs.iter().map(|d| d.slice).collect(),
            counts,
            weights,
            log_beta,
        })
    }
}

/// KL of a sampled chain against its prior: `(first slice, later slices)`.
fn chain_kl(
    tape: &mut Tape,
    store: &ParameterStore,
    chain: ChainSample,
    transition: Option<&str>,
    delta: f64,
) -> Result<(Var, Option<Var>)> {
    let (steps, dim) = {
        let s = tape.value(chain.sample);
        (s.rows(), s.cols())
    };
    let m1 = tape.slice_rows(chain.mean, 0, 1)?;
    let l1 = tape.slice_rows(chain.logvar, 0, 1)?;
    let zero = tape.constant(Tensor::zeros(&[1, dim]));
    let first = tape.kl_gaussian(m1, l1, zero, zero)?;
    let first = tape.sum(first)?;
    if steps < 2 {
        return Ok((first, None));
    }
    let prev = tape.slice_rows(chain.sample, 0, steps - 1)?;
    let prior_mean = match transition {
        Some(prefix) => {
            let delta_net = Mlp::named(prefix).forward(tape, store, prev)?;
            tape.add(prev, delta_net)?
        }
        None => prev,
    };
    let prior_logvar = tape.constant(Tensor::filled(&[steps - 1, dim], delta.ln()));
    let mq = tape.slice_rows(chain.mean, 1, steps)?;
    let lq = tape.slice_rows(chain.logvar, 1, steps)?;
    let rest = tape.kl_gaussian(mq, lq, prior_mean, prior_logvar)?;
    Ok((first, Some(tape.sum(rest)?)))
}

#[allow(clippy::too_many_arguments)]
fn one_draw(
    tape: &mut Tape,
    store: &ParameterStore,
    hyper: &ModelHyperParams,
    shared: &Shared,
    encoded: crate::inference::Encoded,
    batch: &Batch,
    settings: &ElboSettings,
    noise: NoiseKey,
    draw: usize,
) -> Result<(Var, ElboBreakdown)> {
    let steps = tape.value(encoded.h_eta).rows();
    let k = hyper.num_topics;
    let (xi_noise, eta_noise) = noise.global(draw, steps, hyper.dim_xi, hyper.dim_eta);
    let transition = |name: &'static str| (!hyper.linear_transition).then_some(name);

    let eta = infer_chain(tape, store, enc::POST_ETA, encoded.h_eta, &eta_noise)?;
    let (kl_eta1, kl_eta_seq) = chain_kl(tape, store, eta, transition(gen::TRANS_ETA), hyper.delta)?;

    let n = batch.docs.len();
    let (mut zeta_noise, mut uniforms) = (Vec::with_capacity(n * k), Vec::with_capacity(n * k));
    for &d in &batch.docs {
        let (z, u) = noise.local(draw, d, k);
        zeta_noise.extend(z);
        uniforms.extend(u);
    }

    let eta_rows = tape.gather_rows(eta.sample, shared.slices.clone())?;
    let q_zeta = posterior_zeta(tape, store, shared.w_norm, eta_rows)?;
    let zeta = reparam_gaussian(tape, q_zeta, Tensor::matrix(n, k, zeta_noise)?)?;
    let w_zeta = tape.param(store, gen::W_ZETA)?;
    let c_zeta = tape.param(store, gen::C_ZETA)?;
    let prior_zeta = tape.affine(eta_rows, w_zeta, c_zeta)?;
    let unit = tape.constant(Tensor::zeros(&[n, k]));
    let kl_zeta_rows = tape.kl_gaussian(q_zeta.mean, q_zeta.logvar, prior_zeta, unit)?;

    let mut kl_xi = None;
    let (theta, kl_b_rows) = match encoded.h_xi {
        None => (tape.softmax(zeta)?, None),
        Some(h_xi) => {
            let xi = infer_chain(tape, store, enc::POST_XI, h_xi, &xi_noise)?;
            kl_xi = Some(chain_kl(tape, store, xi, transition(gen::TRANS_XI), hyper.delta)?);
            let w_xi = tape.param(store, gen::W_XI)?;
            let c_xi = tape.param(store, gen::C_XI)?;
            let act = tape.affine(xi.sample, w_xi, c_xi)?;
            let act = tape.sigmoid(act)?;
            let pi = tape.scale(act, hyper.alpha0)?;
            let pi_rows = tape.gather_rows(pi, shared.slices.clone())?;
            let xi_rows = tape.gather_rows(xi.sample, shared.slices.clone())?;
            let logits = posterior_b_logits(tape, store, shared.w_norm, xi_rows)?;
            let q = tape.sigmoid(logits)?;
            let kl = tape.kl_bernoulli(q, pi_rows)?;
            let u = Tensor::matrix(n, k, uniforms)?;
            let b = relaxed_bernoulli(tape, logits, settings.relax, &u)?;
            (tape.masked_softmax(b, zeta, THETA_EPS)?, Some(kl))
        }
    };

    let recon_rows = tape.mixture_loglik(theta, shared.log_beta, shared.counts.clone())?;
    let weighted_sum = |tape: &mut Tape, rows: Var| -> Result<Var> {
        let w = tape.mul(rows, shared.weights)?;
        tape.sum(w)
    };
    let recon = weighted_sum(tape, recon_rows)?;
    let kl_zeta = weighted_sum(tape, kl_zeta_rows)?;

    let mut kl_terms = vec![kl_eta1, kl_zeta];
    kl_terms.extend(kl_eta_seq);
    let mut kl_b = None;
    if let Some(rows) = kl_b_rows {
        let v = weighted_sum(tape, rows)?;
        kl_terms.push(v);
        kl_b = Some(v);
    }
    if let Some((first, rest)) = kl_xi {
        kl_terms.push(first);
        kl_terms.extend(rest);
    }
    let mut kl = kl_terms[0];
    for &t in &kl_terms[1..] {
        kl = tape.add(kl, t)?;
    }
    let scaled_kl = tape.scale(kl, settings.kl_scale)?;
    let objective = tape.sub(recon, scaled_kl)?;

    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let mut breakdown = ElboBreakdown {
        recon: val(Some(recon)),
        kl_eta1: val(Some(kl_eta1)),
        kl_eta_seq: val(kl_eta_seq),
        kl_zeta: val(Some(kl_zeta)),
        kl_b: val(kl_b),
        kl_xi1: val(kl_xi.map(|x| x.0)),
        kl_xi_seq: val(kl_xi.and_then(|x| x.1)),
        total: 0.0,
    };
    breakdown.total = breakdown.recon - breakdown.kl_sum();
    Ok((objective, breakdown))
}
