use rand::Rng;

use crate::corpus::DocRef;
use crate::diffcore::{softmax_in_place, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::genmodel::{entropy, topic_proportions, GenerativeParams, ModelHyperParams};
use crate::inference::{
    encode_sequence, hard_bernoulli, infer_chain, names as enc, posterior_b_logits, posterior_zeta,
};
use crate::rng::{normals, open_uniforms, stream, StreamRng};

/// Parameters of a fitted model with the derived topic matrix cached.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub hyper: ModelHyperParams,
    pub store: ParameterStore,
    pub params: GenerativeParams,
    pub log_beta: Tensor,
}

impl TrainedModel {
    pub fn new(hyper: ModelHyperParams, store: ParameterStore) -> Result<Self> {
        hyper.validate()?;
        let params = GenerativeParams::from_store(&store, &hyper)?;
        let log_beta = params.log_beta()?;
        Ok(Self {
            hyper,
            store,
            params,
            log_beta,
        })
    }

    /// `K x V` topic-word probabilities.
    pub fn beta(&self) -> Tensor {
        self.log_beta.map(f64::exp)
    }

    pub fn num_topics(&self) -> usize {
        self.hyper.num_topics
    }
}

/// One draw of the global chains, rows indexed by slice. `xi` rows are
/// empty in coupled mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPath {
    pub xi: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
}

/// Sample `xi_{1:T}, eta_{1:T}` from the posterior given `slice_bow`.
/// Without `rng` the noise is zero, which follows the conditional means.
pub fn sample_globals(model: &TrainedModel, slice_bow: &[Vec<f64>], rng: Option<&mut StreamRng>) -> Result<GlobalPath> {
    let h = &model.hyper;
    let steps = slice_bow.len();
    let draw = |dim: usize, rng: &mut Option<&mut StreamRng>| -> Result<Tensor> {
        let data = match rng {
            Some(r) => normals(*r, steps * dim),
            None => vec![0.0; steps * dim],
        };
        Tensor::matrix(steps, dim, data)
    };
    let mut rng = rng;
    let eta_noise = draw(h.dim_eta, &mut rng)?;
    let xi_noise = draw(h.dim_xi, &mut rng)?;

    let mut tape = Tape::new();
    let encoded = encode_sequence(&mut tape, &model.store, h, slice_bow)?;
    let eta = infer_chain(&mut tape, &model.store, enc::POST_ETA, encoded.h_eta, &eta_noise)?;
    let eta = tape.value(eta.sample).to_rows();
    let xi = match encoded.h_xi {
        Some(h_xi) => {
            let xi = infer_chain(&mut tape, &model.store, enc::POST_XI, h_xi, &xi_noise)?;
            tape.value(xi.sample).to_rows()
        }
        None => vec![Vec::new(); steps],
    };
    Ok(GlobalPath { xi, eta })
}

/// Advance both chains `steps` slices through the prior transitions.
pub fn propagate_prior(
    model: &TrainedModel,
    last: (&[f64], &[f64]),
    steps: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = &model.hyper;
    let (mut xi, mut eta) = (last.0.to_vec(), last.1.to_vec());
    for _ in 0..steps {
        let g = model.params.prior_eta(Some(&eta), h.dim_eta, h.delta)?;
        eta = gaussian_draw(&g.mean, &g.var, rng);
        if !h.coupled {
            let g = model.params.prior_xi(Some(&xi), h.dim_xi, h.delta)?;
            xi = gaussian_draw(&g.mean, &g.var, rng);
        }
    }
    Ok((xi, eta))
}

pub(crate) fn gaussian_draw(mean: &[f64], var: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let z = normals(rng, mean.len());
    mean.iter().zip(var).zip(z).map(|((m, v), z)| m + v.sqrt() * z).collect()
}

/// Local posterior of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct DocPosterior {
    pub zeta_mean: Vec<f64>,
    pub zeta_var: Vec<f64>,
    /// Activity probabilities; `None` in coupled mode.
    pub q: Option<Vec<f64>>,
}

/// Posteriors of `zeta` and `b` for documents given as `(slice, normalized counts)`.
pub fn doc_posteriors(model: &TrainedModel, path: &GlobalPath, inputs: &[(usize, Vec<f64>)]) -> Result<Vec<DocPosterior>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<Vec<f64>> = inputs.iter().map(|(_, w)| w.clone()).collect();
    let eta_rows: Vec<Vec<f64>> = inputs.iter().map(|&(t, _)| path.eta[t].clone()).collect();
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::from_rows(&rows)?);
    let eta = tape.constant(Tensor::from_rows(&eta_rows)?);
    let g = posterior_zeta(&mut tape, &model.store, w, eta)?;
    let means = tape.value(g.mean).to_rows();
    let vars = tape.value(g.logvar).map(f64::exp).to_rows();
    let qs = if model.hyper.coupled {
        vec![None; inputs.len()]
    } else {
        let xi_rows: Vec<Vec<f64>> = inputs.iter().map(|&(t, _)| path.xi[t].clone()).collect();
        let xi = tape.constant(Tensor::from_rows(&xi_rows)?);
        let logits = posterior_b_logits(&mut tape, &model.store, w, xi)?;
        let q = tape.sigmoid(logits)?;
        tape.value(q).to_rows().into_iter().map(Some).collect()
    };
    Ok(means
        .into_iter()
        .zip(vars)
        .zip(qs)
        .map(|((zeta_mean, zeta_var), q)| DocPosterior { zeta_mean, zeta_var, q })
        .collect())
}

/// Proportions and hard mask from one posterior draw.
pub fn draw_theta(post: &DocPosterior, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let k = post.zeta_mean.len();
    let zeta = gaussian_draw(&post.zeta_mean, &post.zeta_var, rng);
    let u = open_uniforms(rng, k);
    match &post.q {
        None => {
            let mut theta = zeta;
            softmax_in_place(&mut theta);
            (theta, vec![1.0; k])
        }
        Some(q) => {
            let b: Vec<f64> = q.iter().zip(&u).map(|(&q, &u)| hard_bernoulli(q, u)).collect();
            (topic_proportions(&b, &zeta).0, b)
        }
    }
}

/// Per-document summary over posterior draws with hard masks.
#[derive(Clone, Debug, PartialEq)]
pub struct DocSummary {
    pub doc: DocRef,
    /// Mean over draws of the entropy of `theta`.
    pub entropy: f64,
    /// Fraction of draws with each topic switched on.
    pub activity: Vec<f64>,
    /// Posterior activity probabilities (all ones in coupled mode).
    pub q: Vec<f64>,
}

pub(crate) const SUMMARY_GLOBAL: u64 = 0x5300;
pub(crate) const SUMMARY_DOC: u64 = 0x5301;

/// Infer every document of `docs` from its full counts, `samples` draws each.
pub fn summarize_documents(
    model: &TrainedModel,
    corpus: &crate::corpus::CorpusSequence,
    docs: &[DocRef],
    samples: usize,
    seed: u64,
) -> Result<Vec<DocSummary>> {
    if samples == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let v = corpus.vocab_size();
    let inputs: Vec<(usize, Vec<f64>)> = docs.iter().map(|&d| (d.slice, corpus.doc(d).normalized(v))).collect();
    let k = model.num_topics();
    let per_draw = super::map_indices(samples, |s| {
        let path = sample_globals(model, corpus.slice_bow(), Some(&mut stream(seed, &[SUMMARY_GLOBAL, s as u64])))?;
        let posts = doc_posteriors(model, &path, &inputs)?;
        Ok(docs
            .iter()
            .zip(&posts)
            .map(|(d, p)| {
                let mut rng = stream(seed, &[SUMMARY_DOC, s as u64, d.slice as u64, d.index as u64]);
                let (theta, b) = draw_theta(p, &mut rng);
                (entropy(&theta), b, p.q.clone().unwrap_or_else(|| vec![1.0; k]))
            })
            .collect::<Vec<_>>())
    })?;
    let scale = 1.0 / samples as f64;
    Ok(docs
        .iter()
        .enumerate()
        .map(|(i, &doc)| {
            let mut s = DocSummary {
                doc,
                entropy: 0.0,
                activity: vec![0.0; k],
                q: vec![0.0; k],
            };
            for draw in &per_draw {
                let (h, b, q) = &draw[i];
                s.entropy += h * scale;
                for j in 0..k {
                    s.activity[j] += b[j] * scale;
                    s.q[j] += q[j] * scale;
                }
            }
            s
        })
        .collect())
}
