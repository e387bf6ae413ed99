//! Structured variational posterior.
//!
//! LSTMs summarize the per-slice word frequencies; the global states are
//! inferred in time order, each conditioned on the previous sample and the
//! current summary. Per-document posteriors over `zeta` (Gaussian) and `b`
//! (Bernoulli) take the document's normalized counts and the slice's sampled
//! global state. During training `b` is relaxed with a binary concrete
//! sample.

use serde::{Deserialize, Serialize};

use crate::diffcore::{lstm_cell, sigmoid, LstmWeights, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genmodel::ModelHyperParams;
use crate::nets::{normal_tensor, Mlp};

pub const LOGVAR_CLAMP: f64 = 10.0;
pub const LOGIT_CLAMP: f64 = 15.0;

/// Parameter name prefixes of the inference networks.
pub mod names {
    pub const LSTM_XI: &str = "enc.lstm_xi";
    pub const LSTM_XI_BWD: &str = "enc.lstm_xi_bwd";
    pub const LSTM_ETA: &str = "enc.lstm_eta";
    pub const LSTM_ETA_BWD: &str = "enc.lstm_eta_bwd";
    pub const POST_XI: &str = "enc.post_xi";
    pub const POST_ETA: &str = "enc.post_eta";
    pub const POST_ZETA: &str = "enc.post_zeta";
    pub const POST_B: &str = "enc.post_b";
}

/// How the discrete mask is sampled during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    pub tau: f64,
    /// Exact Bernoulli draw forward, concrete-sample gradient backward.
    pub straight_through: bool,
}

/// Register every encoder tensor for `hyper` (activity networks skipped in coupled mode).
pub fn register_encoder(store: &mut ParameterStore, hyper: &ModelHyperParams, seed: u64) -> Result<()> {
    let (v, k, h, ph) = (
        hyper.vocab_size,
        hyper.num_topics,
        hyper.encoder_hidden,
        hyper.posterior_hidden,
    );
    let summary = summary_width(hyper);
    let init = |prefix: &str| {
        let mut part = 0;
        let prefix = prefix.to_owned();
        move |shape: &[usize], fan_in: usize| {
            part += 1;
            normal_tensor(seed, &format!("{prefix}#{part}"), shape, (1.0 / fan_in as f64).sqrt())
        }
    };
    let mut streams = vec![names::LSTM_ETA];
    if hyper.bidirectional_encoder {
        streams.push(names::LSTM_ETA_BWD);
    }
    if !hyper.coupled {
        streams.push(names::LSTM_XI);
        if hyper.bidirectional_encoder {
            streams.push(names::LSTM_XI_BWD);
        }
    }
    for s in streams {
        LstmWeights::named(s).register(store, v, h, &mut init(s))?;
    }
    Mlp::named(names::POST_ETA).register(store, (hyper.dim_eta + summary, ph, 2 * hyper.dim_eta), seed, 0.1)?;
    Mlp::named(names::POST_ZETA).register(store, (v + hyper.dim_eta, ph, 2 * k), seed, 0.1)?;
    if !hyper.coupled {
        Mlp::named(names::POST_XI).register(store, (hyper.dim_xi + summary, ph, 2 * hyper.dim_xi), seed, 0.1)?;
        Mlp::named(names::POST_B).register(store, (v + hyper.dim_xi, ph, k), seed, 0.1)?;
    }
    Ok(())
}

/// Width of the per-slice encoder summary.
pub fn summary_width(hyper: &ModelHyperParams) -> usize {
    if hyper.bidirectional_encoder {
        2 * hyper.encoder_hidden
    } else {
        hyper.encoder_hidden
    }
}

/// Per-slice summaries `T x H` (or `T x 2H` when bidirectional).
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h_xi: Option<Var>,
    pub h_eta: Var,
}

/// Run the LSTM streams over `slice_bow` (`T x V`) from zero states.
pub fn encode_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    hyper: &ModelHyperParams,
    slice_bow: &[Vec<f64>],
) -> Result<Encoded> {
    if slice_bow.is_empty() {
        return Err(Error::Input("encoder needs at least one slice".into()));
    }
    let bow = tape.constant(Tensor::from_rows(slice_bow)?);
    let run = |tape: &mut Tape, fwd: &str, bwd: &str| -> Result<Var> {
        let forward = run_lstm(tape, store, &LstmWeights::named(fwd), bow, slice_bow.len(), false)?;
        if hyper.bidirectional_encoder {
            let backward = run_lstm(tape, store, &LstmWeights::named(bwd), bow, slice_bow.len(), true)?;
            tape.concat_cols(&[forward, backward])
        } else {
            Ok(forward)
        }
    };
    let h_eta = run(tape, names::LSTM_ETA, names::LSTM_ETA_BWD)?;
    let h_xi = if hyper.coupled {
        None
    } else {
        Some(run(tape, names::LSTM_XI, names::LSTM_XI_BWD)?)
    };
    Ok(Encoded { h_xi, h_eta })
}

fn run_lstm(
    tape: &mut Tape,
    store: &ParameterStore,
    weights: &LstmWeights,
    bow: Var,
    steps: usize,
    reverse: bool,
) -> Result<Var> {
    let hidden = weights.hidden_size(store)?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = h;
    let mut outs = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x = tape.slice_rows(bow, t, t + 1)?;
        (h, c) = lstm_cell(tape, store, weights, x, h, c)?;
        outs[t] = h;
    }
    tape.concat_rows(&outs)
}

/// Mean and clamped log-variance rows of a diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

fn split_gaussian(tape: &mut Tape, out: Var, dim: usize) -> Result<GaussianVars> {
    let mean = tape.slice_cols(out, 0, dim)?;
    let raw = tape.slice_cols(out, dim, 2 * dim)?;
    let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok(GaussianVars { mean, logvar })
}

/// `q(state_t | state_{t-1}, h_t)` for one step: inputs are `1 x dim` and `1 x H`.
pub fn posterior_state(
    tape: &mut Tape,
    store: &ParameterStore,
    net: &str,
    prev: Var,
    h_t: Var,
) -> Result<GaussianVars> {
    let dim = tape.value(prev).cols();
    let input = tape.concat_cols(&[prev, h_t])?;
    let out = Mlp::named(net).forward(tape, store, input)?;
    split_gaussian(tape, out, dim)
}

/// `mean + exp(logvar / 2) * noise`.
pub fn reparam_gaussian(tape: &mut Tape, g: GaussianVars, noise: Tensor) -> Result<Var> {
    let half = tape.scale(g.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.constant(noise);
    let scaled = tape.mul(std, eps)?;
    tape.add(g.mean, scaled)
}

/// A sampled global chain: rows are time slices.
#[derive(Clone, Copy, Debug)]
pub struct ChainSample {
    pub mean: Var,
    pub logvar: Var,
    pub sample: Var,
}

/// Infer one global chain in time order from zero initial state.
/// `noise` is `T x dim` standard normal.
pub fn infer_chain(
    tape: &mut Tape,
    store: &ParameterStore,
    net: &str,
    summaries: Var,
    noise: &Tensor,
) -> Result<ChainSample> {
    let (steps, dim) = (noise.rows(), noise.cols());
    if tape.value(summaries).rows() != steps {
        return Err(Error::shape("infer_chain", &[tape.value(summaries).shape(), noise.shape()]));
    }
    let mut prev = tape.constant(Tensor::zeros(&[1, dim]));
    let (mut means, mut logvars, mut samples) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..steps {
        let h_t = tape.slice_rows(summaries, t, t + 1)?;
        let g = posterior_state(tape, store, net, prev, h_t)?;
        let s = reparam_gaussian(tape, g, Tensor::row(noise.row_slice(t).to_vec()))?;
        means.push(g.mean);
        logvars.push(g.logvar);
        samples.push(s);
        prev = s;
    }
    Ok(ChainSample {
        mean: tape.concat_rows(&means)?,
        logvar: tape.concat_rows(&logvars)?,
        sample: tape.concat_rows(&samples)?,
    })
}

/// `q(zeta | w, eta_t)` for a batch: `w_norm` is `n x V`, `eta_rows` `n x dim_eta`.
pub fn posterior_zeta(
    tape: &mut Tape,
    store: &ParameterStore,
    w_norm: Var,
    eta_rows: Var,
) -> Result<GaussianVars> {
    let input = tape.concat_cols(&[w_norm, eta_rows])?;
    let out = Mlp::named(names::POST_ZETA).forward(tape, store, input)?;
    let k = tape.value(out).cols() / 2;
    split_gaussian(tape, out, k)
}

/// Clamped logits of `q(b | w, xi_t)`; probabilities are their sigmoid.
pub fn posterior_b_logits(
    tape: &mut Tape,
    store: &ParameterStore,
    w_norm: Var,
    xi_rows: Var,
) -> Result<Var> {
    let input = tape.concat_cols(&[w_norm, xi_rows])?;
    let out = Mlp::named(names::POST_B).forward(tape, store, input)?;
    tape.clamp(out, -LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Binary concrete sample `sigmoid((logit + ln u - ln(1-u)) / tau)`.
///
/// With straight-through the forward value is the exact draw `1[u < q]` and
/// the gradient is that of the concrete sample at the same `u`. The concrete
/// sample rounds to one when `u > 1 - q`, so its slope is largest when the
/// forward draw takes its more probable value.
pub fn relaxed_bernoulli(tape: &mut Tape, logits: Var, relax: Relaxation, u: &Tensor) -> Result<Var> {
    let logistic = u.map(|u| u.ln() - (-u).ln_1p());
    let noise = tape.constant(logistic);
    let shifted = tape.add(logits, noise)?;
    let tempered = tape.scale(shifted, 1.0 / relax.tau)?;
    let soft = tape.sigmoid(tempered)?;
    if !relax.straight_through {
        return Ok(soft);
    }
    let hard = tape
        .value(logits)
        .zip_map(u, |l, u| hard_bernoulli(sigmoid(l), u));
    let hard = tape.constant(hard);
    tape.straight_through(hard, soft)
}

/// Plain binary concrete value for one coordinate.
pub fn relaxed_bernoulli_value(q: f64, tau: f64, u: f64) -> f64 {
    sigmoid((q.ln() - (-q).ln_1p() + u.ln() - (-u).ln_1p()) / tau)
}

/// Exact Bernoulli draw `1[u < q]`.
pub fn hard_bernoulli(q: f64, u: f64) -> f64 {
    if u < q {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, open_uniforms, stream};

    fn hyper(bidirectional: bool) -> ModelHyperParams {
        ModelHyperParams {
            num_topics: 3,
            vocab_size: 6,
            embedding_dim: 2,
            dim_xi: 2,
            dim_eta: 2,
            transition_hidden: 3,
            encoder_hidden: 4,
            posterior_hidden: 5,
            bidirectional_encoder: bidirectional,
            ..Default::default()
        }
    }

    fn store(h: &ModelHyperParams) -> ParameterStore {
        let mut s = ParameterStore::new();
        register_encoder(&mut s, h, 3).unwrap();
        s
    }

    fn bow(t: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| {
                let mut r = vec![0.0; 6];
                r[i % 6] = 0.5;
                r[(i + 2) % 6] = 0.5;
                r
            })
            .collect()
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_states() {
        let h = hyper(false);
        let mut s = store(&h);
        let names: Vec<String> = s.names().map(str::to_owned).collect();
        for n in names.iter().filter(|n| n.starts_with("enc.lstm")) {
            let shape = s.get(n).unwrap().shape().to_vec();
            s.set(n, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let e = encode_sequence(&mut tape, &s, &h, &vec![vec![0.0; 6]; 3]).unwrap();
        assert!(tape.value(e.h_eta).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(e.h_eta).shape(), &[3, 4]);
    }

    #[test]
    fn forward_encoder_is_causal() {
        let h = hyper(false);
        let s = store(&h);
        let full = bow(5);
        let mut t1 = Tape::new();
        let a = encode_sequence(&mut t1, &s, &h, &full).unwrap();
        let mut t2 = Tape::new();
        let b = encode_sequence(&mut t2, &s, &h, &full[..3]).unwrap();
        assert_eq!(&t1.value(a.h_xi.unwrap()).data()[..12], t2.value(b.h_xi.unwrap()).data());
        assert_eq!(&t1.value(a.h_eta).data()[..12], t2.value(b.h_eta).data());
    }

    #[test]
    fn bidirectional_doubles_summary() {
        let h = hyper(true);
        let s = store(&h);
        let mut tape = Tape::new();
        let e = encode_sequence(&mut tape, &s, &h, &bow(4)).unwrap();
        assert_eq!(tape.value(e.h_eta).shape(), &[4, 8]);
    }

    #[test]
    fn zero_posterior_net_gives_bias() {
        let h = hyper(false);
        let mut s = store(&h);
        let m = Mlp::named(names::POST_XI);
        s.set(&m.w2, Tensor::zeros(&[5, 4])).unwrap();
        s.set(&m.b2, Tensor::vector(vec![0.1, 0.2, 30.0, -1.0])).unwrap();
        let mut tape = Tape::new();
        let prev = tape.constant(Tensor::zeros(&[1, 2]));
        let ht = tape.constant(Tensor::row(vec![0.3; 4]));
        let g = posterior_state(&mut tape, &s, names::POST_XI, prev, ht).unwrap();
        assert_eq!(tape.value(g.mean).data(), &[0.1, 0.2]);
        assert_eq!(tape.value(g.logvar).data(), &[LOGVAR_CLAMP, -1.0]);
    }

    #[test]
    fn zeta_posterior_ignores_count_scale() {
        let h = hyper(false);
        let s = store(&h);
        let doc = crate::corpus::Document::new(0, [(1, 2), (4, 1)]).unwrap();
        let doubled = crate::corpus::Document::new(0, [(1, 4), (4, 2)]).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::from_rows(&[doc.normalized(6), doubled.normalized(6)]).unwrap());
        let eta = tape.constant(Tensor::filled(&[2, 2], 0.3));
        let g = posterior_zeta(&mut tape, &s, w, eta).unwrap();
        let m = tape.value(g.mean);
        assert_eq!(m.row_slice(0), m.row_slice(1));
    }

    #[test]
    fn b_logits_are_clamped() {
        let h = hyper(false);
        let mut s = store(&h);
        let m = Mlp::named(names::POST_B);
        s.set(&m.b2, Tensor::vector(vec![100.0, -100.0, 0.0])).unwrap();
        s.set(&m.w2, Tensor::zeros(&[5, 3])).unwrap();
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::filled(&[1, 6], 1.0 / 6.0));
        let xi = tape.constant(Tensor::zeros(&[1, 2]));
        let l = posterior_b_logits(&mut tape, &s, w, xi).unwrap();
        let q: Vec<f64> = tape.value(l).data().iter().map(|&x| sigmoid(x)).collect();
        assert!(q[0] < 1.0 && q[0] > 1.0 - 3.1e-7);
        assert!(q[1] > 0.0 && q[1] < 3.1e-7);
        assert_eq!(q[2], 0.5);
    }

    #[test]
    fn concrete_limits() {
        assert!((relaxed_bernoulli_value(0.5, 0.37, 0.5) - 0.5).abs() < 1e-15);
        assert!(relaxed_bernoulli_value(0.6, 1e-3, 0.5) > 1.0 - 1e-12);
        assert!(relaxed_bernoulli_value(0.4, 1e-3, 0.5) < 1e-12);
    }

    #[test]
    fn tape_concrete_matches_plain_and_straight_through_is_hard() {
        let logits = vec![-1.0, 0.0, 2.0];
        let u = Tensor::row(vec![0.2, 0.7, 0.5]);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row(logits.clone()));
        let relax = Relaxation { tau: 0.6, straight_through: false };
        let soft = relaxed_bernoulli(&mut tape, l, relax, &u).unwrap();
        for (i, &x) in tape.value(soft).data().iter().enumerate() {
            let want = relaxed_bernoulli_value(sigmoid(logits[i]), 0.6, u.data()[i]);
            assert!((x - want).abs() < 1e-12);
        }
        let st = relaxed_bernoulli(&mut tape, l, Relaxation { straight_through: true, ..relax }, &u).unwrap();
        // u < sigmoid(logit): 0.2 < 0.269, 0.7 > 0.5, 0.5 < 0.881
        assert_eq!(tape.value(st).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn straight_through_gradient_is_the_concrete_slope() {
        let mut store = ParameterStore::new();
        store.insert("l", Tensor::row(vec![-0.4, 1.3])).unwrap();
        let (u, tau) = (vec![0.9, 0.1], 0.5);
        let mut tape = Tape::new();
        let l = tape.param(&store, "l").unwrap();
        let relax = Relaxation { tau, straight_through: true };
        let b = relaxed_bernoulli(&mut tape, l, relax, &Tensor::row(u.clone())).unwrap();
        assert_eq!(tape.value(b).data(), &[0.0, 1.0]);
        let out = tape.sum(b).unwrap();
        let g = tape.backward(out, &store).unwrap();
        for ((x, l), u) in g.get("l").unwrap().data().iter().zip([-0.4f64, 1.3]).zip(u) {
            let s = relaxed_bernoulli_value(sigmoid(l), tau, u);
            assert!((x - s * (1.0 - s) / tau).abs() < 1e-12);
        }
    }

    #[test]
    fn reparam_with_zero_noise_is_mean_and_grad_one() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::row(vec![1.5, -2.0]));
        let logvar = tape.constant(Tensor::row(vec![0.3, -0.4]));
        let s = reparam_gaussian(&mut tape, GaussianVars { mean, logvar }, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(tape.value(s).data(), &[1.5, -2.0]);

        let mut store = ParameterStore::new();
        store.insert("m", Tensor::row(vec![0.7])).unwrap();
        let mut tape = Tape::new();
        let m = tape.param(&store, "m").unwrap();
        let lv = tape.constant(Tensor::row(vec![0.0]));
        let z = normals(&mut stream(1, &[]), 1);
        let s = reparam_gaussian(&mut tape, GaussianVars { mean: m, logvar: lv }, Tensor::row(z)).unwrap();
        let out = tape.sum(s).unwrap();
        let g = tape.backward(out, &store).unwrap();
        assert!((g.get("m").unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_draw_frequency_matches_q() {
        let q = 0.3;
        let n = 100_000;
        let u = open_uniforms(&mut stream(9, &[]), n);
        let mean = u.iter().map(|&u| hard_bernoulli(q, u)).sum::<f64>() / n as f64;
        let se = (q * (1.0 - q) / n as f64).sqrt();
        assert!((mean - q).abs() < 3.0 * se);
    }

    #[test]
    fn chain_uses_previous_sample() {
        let h = hyper(false);
        let s = store(&h);
        let mut tape = Tape::new();
        let e = encode_sequence(&mut tape, &s, &h, &bow(3)).unwrap();
        let noise = Tensor::matrix(3, 2, normals(&mut stream(2, &[]), 6)).unwrap();
        let c = infer_chain(&mut tape, &s, names::POST_ETA, e.h_eta, &noise).unwrap();
        assert_eq!(tape.value(c.sample).shape(), &[3, 2]);
        assert!(tape.value(c.logvar).data().iter().all(|x| x.abs() <= LOGVAR_CLAMP));
    }
}
