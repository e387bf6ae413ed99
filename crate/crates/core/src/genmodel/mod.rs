//! The generative process.
//!
//! Two global Gaussian chains drive each time slice: `xi_t` sets the topic
//! activity probabilities `pi_t = alpha0 * sigmoid(xi_t W_xi + c_xi)` and
//! `eta_t` sets the mean of the per-document proportion logits `zeta`. A
//! document draws a Bernoulli mask `b ~ Bern(pi_t)`, logits
//! `zeta ~ N(eta_t W_zeta + c_zeta, I)`, and mixes topics with
//! `theta = b * exp(zeta) / (sum b * exp(zeta) + eps)`. Topics are
//! `beta = softmax(alpha rho^T)` over shared topic and word embeddings.
//!
//! Plain `f64` functions here are used for sampling and evaluation; training
//! builds the same quantities on a [`Tape`](crate::diffcore::Tape).

mod sample;

use serde::{Deserialize, Serialize};

pub use sample::{sample_corpus, DocumentLatents, LatentTrajectory, SynthOptions};
pub(crate) use sample::sample_mask;

use crate::diffcore::{masked_softmax_values, mixture_log_prob, softmax_in_place, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::nets::{affine_plain, mlp_plain, normal_tensor, Mlp};

/// Denominator guard in the masked softmax.
pub const THETA_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyperParams {
    /// `K`
    pub num_topics: usize,
    /// `V`; taken from the corpus when zero.
    pub vocab_size: usize,
    /// `E`, shared by topic and word embeddings.
    pub embedding_dim: usize,
    pub dim_xi: usize,
    pub dim_eta: usize,
    /// Prior transition variance.
    pub delta: f64,
    /// Ceiling on topic activity probabilities.
    pub alpha0: f64,
    pub transition_hidden: usize,
    /// LSTM state width.
    pub encoder_hidden: usize,
    /// Hidden width of the posterior networks.
    pub posterior_hidden: usize,
    /// Identity prior transitions instead of networks.
    pub linear_transition: bool,
    /// Every topic always active: `theta = softmax(zeta)`.
    pub coupled: bool,
    /// Also run the encoders backwards in time and concatenate.
    pub bidirectional_encoder: bool,
}

impl Default for ModelHyperParams {
    fn default() -> Self {
        Self {
            num_topics: 50,
            vocab_size: 0,
            embedding_dim: 64,
            dim_xi: 16,
            dim_eta: 16,
            delta: 0.05,
            alpha0: 0.5,
            transition_hidden: 32,
            encoder_hidden: 64,
            posterior_hidden: 128,
            linear_transition: false,
            coupled: false,
            bidirectional_encoder: false,
        }
    }
}

impl ModelHyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_topics < 2 {
            return bad(format!("num_topics must be at least 2, got {}", self.num_topics));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return bad(format!("alpha0 must lie in (0, 1], got {}", self.alpha0));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("dim_xi", self.dim_xi),
            ("dim_eta", self.dim_eta),
            ("transition_hidden", self.transition_hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("posterior_hidden", self.posterior_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

/// Parameter names of the generative model inside a [`ParameterStore`].
pub mod names {
    pub const TRANS_XI: &str = "gen.trans_xi";
    pub const TRANS_ETA: &str = "gen.trans_eta";
    /// `dim_xi x K`
    pub const W_XI: &str = "gen.w_xi";
    pub const C_XI: &str = "gen.c_xi";
    /// `dim_eta x K`
    pub const W_ZETA: &str = "gen.w_zeta";
    pub const C_ZETA: &str = "gen.c_zeta";
    /// `K x E`
    pub const ALPHA: &str = "gen.alpha";
    /// `V x E`
    pub const RHO: &str = "gen.rho";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Residual transition mean `x + tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TransitionNet {
    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = mlp_plain(&self.w1, &self.b1, &self.w2, &self.b2, x)?;
        out.iter_mut().zip(x).for_each(|(o, xi)| *o += xi);
        Ok(out)
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub(crate) fn random(seed: u64, prefix: &str, dim: usize, hidden: usize, gain: f64) -> Self {
        let m = Mlp::named(prefix);
        Self {
            w1: normal_tensor(seed, &m.w1, &[dim, hidden], (1.0 / dim as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(seed, &m.w2, &[hidden, dim], gain * (1.0 / hidden as f64).sqrt()),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn load(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let m = Mlp::named(prefix);
        Ok(Self {
            w1: store.get(&m.w1)?.clone(),
            b1: store.get(&m.b1)?.clone(),
            w2: store.get(&m.w2)?.clone(),
            b2: store.get(&m.b2)?.clone(),
        })
    }

    fn insert_into(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        let m = Mlp::named(prefix);
        store.insert(m.w1, self.w1.clone())?;
        store.insert(m.b1, self.b1.clone())?;
        store.insert(m.w2, self.w2.clone())?;
        store.insert(m.b2, self.b2.clone())
    }
}

/// Owned generative parameters. The activity part is absent in coupled mode
/// and the transition networks are absent with identity transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams {
    pub trans_xi: Option<TransitionNet>,
    pub trans_eta: Option<TransitionNet>,
    pub w_xi: Option<Tensor>,
    pub c_xi: Option<Tensor>,
    pub w_zeta: Tensor,
    pub c_zeta: Tensor,
    pub alpha: Tensor,
    pub rho: Tensor,
}

impl GenerativeParams {
    /// Random initialization for training.
    pub fn init(hyper: &ModelHyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let (k, e) = (hyper.num_topics, hyper.embedding_dim);
        let transitions = !hyper.linear_transition;
        let active = !hyper.coupled;
        Ok(Self {
            trans_xi: (transitions && active).then(|| {
                TransitionNet::random(seed, names::TRANS_XI, hyper.dim_xi, hyper.transition_hidden, 0.1)
            }),
            trans_eta: transitions.then(|| {
                TransitionNet::random(seed, names::TRANS_ETA, hyper.dim_eta, hyper.transition_hidden, 0.1)
            }),
            w_xi: active.then(|| {
                normal_tensor(seed, names::W_XI, &[hyper.dim_xi, k], (1.0 / hyper.dim_xi as f64).sqrt())
            }),
            c_xi: active.then(|| Tensor::zeros(&[k])),
            w_zeta: normal_tensor(seed, names::W_ZETA, &[hyper.dim_eta, k], (1.0 / hyper.dim_eta as f64).sqrt()),
            c_zeta: Tensor::zeros(&[k]),
            alpha: normal_tensor(seed, names::ALPHA, &[k, e], (1.0 / e as f64).sqrt()),
            rho: normal_tensor(seed, names::RHO, &[hyper.vocab_size, e], 1.0),
        })
    }

    pub fn from_store(store: &ParameterStore, hyper: &ModelHyperParams) -> Result<Self> {
        let transitions = !hyper.linear_transition;
        let active = !hyper.coupled;
        let get = |n: &str| store.get(n).cloned();
        let p = Self {
            trans_xi: if transitions && active {
                Some(TransitionNet::load(store, names::TRANS_XI)?)
            } else {
                None
            },
            trans_eta: if transitions {
                Some(TransitionNet::load(store, names::TRANS_ETA)?)
            } else {
                None
            },
            w_xi: if active { Some(get(names::W_XI)?) } else { None },
            c_xi: if active { Some(get(names::C_XI)?) } else { None },
            w_zeta: get(names::W_ZETA)?,
            c_zeta: get(names::C_ZETA)?,
            alpha: get(names::ALPHA)?,
            rho: get(names::RHO)?,
        };
        p.check_shapes(hyper)?;
        Ok(p)
    }

    pub fn insert_into(&self, store: &mut ParameterStore) -> Result<()> {
        if let Some(n) = &self.trans_xi {
            n.insert_into(store, names::TRANS_XI)?;
        }
        if let Some(n) = &self.trans_eta {
            n.insert_into(store, names::TRANS_ETA)?;
        }
        if let (Some(w), Some(c)) = (&self.w_xi, &self.c_xi) {
            store.insert(names::W_XI, w.clone())?;
            store.insert(names::C_XI, c.clone())?;
        }
        store.insert(names::W_ZETA, self.w_zeta.clone())?;
        store.insert(names::C_ZETA, self.c_zeta.clone())?;
        store.insert(names::ALPHA, self.alpha.clone())?;
        store.insert(names::RHO, self.rho.clone())
    }

    fn check_shapes(&self, hyper: &ModelHyperParams) -> Result<()> {
        let (k, e, v) = (hyper.num_topics, hyper.embedding_dim, hyper.vocab_size);
        let mut expect: Vec<(&str, &Tensor, Vec<usize>)> = vec![
            (names::W_ZETA, &self.w_zeta, vec![hyper.dim_eta, k]),
            (names::C_ZETA, &self.c_zeta, vec![k]),
            (names::ALPHA, &self.alpha, vec![k, e]),
            (names::RHO, &self.rho, vec![v, e]),
        ];
        if let (Some(w), Some(c)) = (&self.w_xi, &self.c_xi) {
            expect.push((names::W_XI, w, vec![hyper.dim_xi, k]));
            expect.push((names::C_XI, c, vec![k]));
        }
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, hyperparameters imply {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_topics(&self) -> usize {
        self.alpha.rows()
    }

    /// Prior over `xi_t`: standard normal at the first slice, otherwise
    /// centred on the transition of `prev` with variance `delta`.
    pub fn prior_xi(&self, prev: Option<&[f64]>, dim: usize, delta: f64) -> Result<Gaussian> {
        prior_transition(self.trans_xi.as_ref(), prev, dim, delta)
    }

    pub fn prior_eta(&self, prev: Option<&[f64]>, dim: usize, delta: f64) -> Result<Gaussian> {
        prior_transition(self.trans_eta.as_ref(), prev, dim, delta)
    }

    /// `pi_t`; all ones in coupled mode.
    pub fn activity(&self, xi: &[f64], alpha0: f64) -> Result<Vec<f64>> {
        match (&self.w_xi, &self.c_xi) {
            (Some(w), Some(c)) => activity_probs(xi, w, c, alpha0),
            _ => Ok(vec![1.0; self.num_topics()]),
        }
    }

    pub fn zeta_prior(&self, eta: &[f64]) -> Result<Gaussian> {
        local_zeta_prior(eta, &self.w_zeta, &self.c_zeta)
    }

    pub fn beta(&self) -> Result<Tensor> {
        topic_word_matrix(&self.alpha, &self.rho)
    }

    pub fn log_beta(&self) -> Result<Tensor> {
        log_topic_word_matrix(&self.alpha, &self.rho)
    }
}

/// `N(0, I)` without `prev`; otherwise `N(mean(prev), delta I)` where the
/// mean is the identity when `net` is absent.
pub fn prior_transition(
    net: Option<&TransitionNet>,
    prev: Option<&[f64]>,
    dim: usize,
    delta: f64,
) -> Result<Gaussian> {
    match prev {
        None => Ok(Gaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }),
        Some(x) => {
            let mean = match net {
                Some(n) => n.mean(x)?,
                None => x.to_vec(),
            };
            Ok(Gaussian {
                var: vec![delta; mean.len()],
                mean,
            })
        }
    }
}

/// `alpha0 * sigmoid(xi W + c)`.
pub fn activity_probs(xi: &[f64], w: &Tensor, c: &Tensor, alpha0: f64) -> Result<Vec<f64>> {
    Ok(affine_plain(xi, w, c)?
        .into_iter()
        .map(|l| alpha0 * crate::diffcore::sigmoid(l))
        .collect())
}

/// `N(eta W + c, I)`.
pub fn local_zeta_prior(eta: &[f64], w: &Tensor, c: &Tensor) -> Result<Gaussian> {
    let mean = affine_plain(eta, w, c)?;
    Ok(Gaussian {
        var: vec![1.0; mean.len()],
        mean,
    })
}

/// Masked softmax; an all-zero mask gives the uniform distribution and
/// `true` in the second slot.
pub fn topic_proportions(b: &[f64], zeta: &[f64]) -> (Vec<f64>, bool) {
    match masked_softmax_values(b, zeta, THETA_EPS) {
        Some(theta) => (theta, false),
        None => {
            log::debug!("all-zero topic mask; using uniform proportions");
            (vec![1.0 / zeta.len() as f64; zeta.len()], true)
        }
    }
}

fn topic_logits(alpha: &Tensor, rho: &Tensor) -> Result<Tensor> {
    if alpha.shape().len() != 2 || rho.shape().len() != 2 || alpha.cols() != rho.cols() {
        return Err(Error::shape("topic_word_matrix", &[alpha.shape(), rho.shape()]));
    }
    let (k, v, e) = (alpha.rows(), rho.rows(), alpha.cols());
    let mut out = vec![0.0; k * v];
    for i in 0..k {
        let a = alpha.row_slice(i);
        for w in 0..v {
            out[i * v + w] = a.iter().zip(rho.row_slice(w)).map(|(x, y)| x * y).sum();
        }
    }
    debug_assert_eq!(alpha.cols(), e);
    Tensor::matrix(k, v, out)
}

/// `softmax(alpha rho^T)` row-wise: `K x V`.
pub fn topic_word_matrix(alpha: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let mut t = topic_logits(alpha, rho)?;
    for r in 0..t.rows() {
        softmax_in_place(t.row_slice_mut(r));
    }
    Ok(t)
}

pub fn log_topic_word_matrix(alpha: &Tensor, rho: &Tensor) -> Result<Tensor> {
    let mut t = topic_logits(alpha, rho)?;
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        let lse = crate::diffcore::log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Ok(t)
}

/// `sum_w c_w ln(sum_k theta_k beta_kw)` given `ln beta`; also returns how
/// many words hit the probability floor.
pub fn doc_loglikelihood(theta: &[f64], log_beta: &Tensor, counts: &[(u32, u32)]) -> (f64, usize) {
    let log_theta: Vec<f64> = theta.iter().map(|t| t.ln()).collect();
    let mut guards = 0;
    let total = counts
        .iter()
        .map(|&(w, c)| {
            let (lp, floored) = mixture_log_prob(&log_theta, log_beta, w as usize);
            guards += usize::from(floored);
            f64::from(c) * lp
        })
        .sum();
    (total, guards)
}

/// Shannon entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_hyper() -> ModelHyperParams {
        ModelHyperParams {
            num_topics: 3,
            vocab_size: 5,
            embedding_dim: 2,
            dim_xi: 2,
            dim_eta: 2,
            transition_hidden: 3,
            ..Default::default()
        }
    }

    #[test]
    fn identity_transition_and_first_slice_prior() {
        let g = prior_transition(None, Some(&[0.3, -2.0]), 2, 0.05).unwrap();
        assert_eq!(g.mean, vec![0.3, -2.0]);
        assert_eq!(g.var, vec![0.05, 0.05]);
        let g1 = prior_transition(None, None, 2, 0.05).unwrap();
        assert_eq!(g1.mean, vec![0.0, 0.0]);
        assert_eq!(g1.var, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_weight_net_at_origin_gives_bias() {
        let mut net = TransitionNet::zeros(2, 4);
        net.b2 = Tensor::vector(vec![0.7, -0.2]);
        assert_eq!(net.mean(&[0.0, 0.0]).unwrap(), vec![0.7, -0.2]);
        assert_eq!(net.mean(&[1.0, 1.0]).unwrap(), vec![1.7, 0.8]);
    }

    #[test]
    fn activity_probs_bounds() {
        let w = Tensor::zeros(&[2, 3]);
        let pi = activity_probs(&[1.0, 2.0], &w, &Tensor::zeros(&[3]), 0.5).unwrap();
        assert!(pi.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let sat = activity_probs(&[0.0, 0.0], &w, &Tensor::filled(&[3], 30.0), 0.5).unwrap();
        assert!(sat.iter().all(|&p| (p - 0.5).abs() < 1e-9 && p < 0.5));
    }

    #[test]
    fn zeta_prior_is_affine_with_unit_variance() {
        let c = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let g = local_zeta_prior(&[0.0, 0.0], &Tensor::filled(&[2, 3], 0.4), &c).unwrap();
        assert_eq!(g.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(g.var, vec![1.0; 3]);
        let g = local_zeta_prior(&[5.0, -1.0], &Tensor::zeros(&[2, 3]), &c).unwrap();
        assert_eq!(g.mean, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn proportions_closed_forms() {
        let (t, _) = topic_proportions(&[1.0; 4], &[0.7; 4]);
        assert!(t.iter().all(|&x| (x - 0.25).abs() < 1e-9));
        let (t, _) = topic_proportions(&[0.0, 1.0, 0.0], &[9.0, -3.0, 4.0]);
        assert!((t[1] - 1.0).abs() < 1e-9 && t[0] == 0.0 && t[2] == 0.0);
        let (t, _) = topic_proportions(&[1.0, 0.0, 1.0], &[0.0, 99.0, 3f64.ln()]);
        assert!((t[0] - 0.25).abs() < 1e-9 && t[1] == 0.0 && (t[2] - 0.75).abs() < 1e-9);
        let (t, guard) = topic_proportions(&[0.0; 3], &[1.0, 2.0, 3.0]);
        assert!(guard && t.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn beta_rows_and_uniform_case() {
        let rho = normal_tensor(1, "rho", &[7, 3], 1.0);
        let beta = topic_word_matrix(&Tensor::zeros(&[2, 3]), &rho).unwrap();
        assert!(beta.data().iter().all(|&b| (b - 1.0 / 7.0).abs() < 1e-15));
        let beta = topic_word_matrix(&normal_tensor(2, "a", &[4, 3], 2.0), &rho).unwrap();
        for r in 0..4 {
            assert!((beta.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loglik_reductions() {
        let alpha = normal_tensor(3, "a", &[3, 2], 1.0);
        let rho = normal_tensor(3, "r", &[6, 2], 1.0);
        let lb = log_topic_word_matrix(&alpha, &rho).unwrap();
        let counts = [(0, 2), (4, 1), (5, 3)];
        let (ll, g) = doc_loglikelihood(&[0.0, 1.0, 0.0], &lb, &counts);
        let direct: f64 = counts.iter().map(|&(w, c)| f64::from(c) * lb.get(1, w as usize)).sum();
        assert!((ll - direct).abs() < 1e-12 && g == 0);

        let uniform = log_topic_word_matrix(&Tensor::zeros(&[3, 2]), &rho).unwrap();
        let (ll, _) = doc_loglikelihood(&[1.0 / 3.0; 3], &uniform, &counts);
        assert!((ll - 6.0 * (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn params_store_round_trip_by_mode() {
        for (lin, coupled) in [(false, false), (true, false), (false, true), (true, true)] {
            let h = ModelHyperParams {
                linear_transition: lin,
                coupled,
                ..tiny_hyper()
            };
            let p = GenerativeParams::init(&h, 4).unwrap();
            assert_eq!(p.trans_eta.is_none(), lin);
            assert_eq!(p.w_xi.is_none(), coupled);
            let mut store = ParameterStore::new();
            p.insert_into(&mut store).unwrap();
            assert_eq!(GenerativeParams::from_store(&store, &h).unwrap(), p);
        }
    }

    #[test]
    fn coupled_activity_is_all_ones() {
        let h = ModelHyperParams {
            coupled: true,
            ..tiny_hyper()
        };
        let p = GenerativeParams::init(&h, 0).unwrap();
        assert_eq!(p.activity(&[0.0, 0.0], 0.5).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn hyper_validation() {
        assert!(tiny_hyper().validate().is_ok());
        for h in [
            ModelHyperParams { alpha0: 0.0, ..tiny_hyper() },
            ModelHyperParams { alpha0: 1.5, ..tiny_hyper() },
            ModelHyperParams { delta: 0.0, ..tiny_hyper() },
            ModelHyperParams { num_topics: 1, ..tiny_hyper() },
            ModelHyperParams { vocab_size: 0, ..tiny_hyper() },
        ] {
            assert!(matches!(h.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[1.0 / 50.0; 50]) - 50f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
    }
}
