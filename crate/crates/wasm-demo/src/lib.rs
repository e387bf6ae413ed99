//! Browser bindings for a few pieces of the model: masked topic proportions,
//! simulated activity series, and the relaxed Bernoulli sampler.

use ndftm::genmodel::{entropy, sample_corpus, topic_proportions, ModelHyperParams, SynthOptions};
use ndftm::inference::relaxed_bernoulli_value;
use ndftm::rng::{open_uniforms, stream};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Proportions over topics with `mask[k] > 0`; the last entry is their entropy.
pub fn proportions(mask: &[f64], logits: &[f64]) -> Result<Vec<f64>, String> {
    if mask.len() != logits.len() || mask.is_empty() {
        return Err("mask and logits need the same non-zero length".into());
    }
    let (mut theta, _) = topic_proportions(mask, logits);
    let h = entropy(&theta);
    theta.push(h);
    Ok(theta)
}

/// Samples a small synthetic corpus and returns, as JSON, the activity
/// probabilities per slice, the observed share of documents using each
/// topic, and the mean entropy of document proportions.
pub fn simulate(topics: usize, slices: usize, alpha0: f64, skew: f64, coupled: bool, seed: u64) -> Result<String, String> {
    let hyper = ModelHyperParams {
        num_topics: topics,
        vocab_size: 200,
        embedding_dim: 8,
        dim_xi: 3,
        dim_eta: 3,
        transition_hidden: 8,
        alpha0,
        coupled,
        ..Default::default()
    };
    let opts = SynthOptions {
        num_slices: slices,
        docs_per_slice: 60,
        tokens_per_doc: 20,
        skew,
        seed,
        ..Default::default()
    };
    let truth = opts.ground_truth(&hyper).map_err(|e| e.to_string())?;
    let (_, latents) = sample_corpus(&hyper, &truth, &opts).map_err(|e| e.to_string())?;
    let used: Vec<Vec<f64>> = latents
        .docs
        .iter()
        .map(|docs| {
            (0..topics)
                .map(|k| docs.iter().filter(|d| d.b[k] > 0.5).count() as f64 / docs.len() as f64)
                .collect()
        })
        .collect();
    let ent: Vec<f64> = latents
        .docs
        .iter()
        .map(|docs| docs.iter().map(|d| entropy(&d.theta)).sum::<f64>() / docs.len() as f64)
        .collect();
    Ok(json!({ "pi": latents.pi, "used": used, "entropy": ent }).to_string())
}

/// Histogram over [0, 1] of relaxed Bernoulli draws with probability `q`
/// and temperature `tau`.
pub fn concrete_histogram(q: f64, tau: f64, draws: usize, bins: usize, seed: u64) -> Result<Vec<f64>, String> {
    if !(q > 0.0 && q < 1.0) || !(tau > 0.0) || bins == 0 || draws == 0 {
        return Err("need 0 < q < 1, tau > 0 and positive counts".into());
    }
    let mut hist = vec![0.0; bins];
    for u in open_uniforms(&mut stream(seed, &[]), draws) {
        let x = relaxed_bernoulli_value(q, tau, u);
        hist[((x * bins as f64) as usize).min(bins - 1)] += 1.0 / draws as f64;
    }
    Ok(hist)
}

#[wasm_bindgen(js_name = proportions)]
pub fn proportions_js(mask: &[f64], logits: &[f64]) -> Result<Vec<f64>, JsError> {
    proportions(mask, logits).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(topics: usize, slices: usize, alpha0: f64, skew: f64, coupled: bool, seed: u32) -> Result<String, JsError> {
    simulate(topics, slices, alpha0, skew, coupled, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = concreteHistogram)]
pub fn concrete_histogram_js(q: f64, tau: f64, draws: usize, bins: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    concrete_histogram(q, tau, draws, bins, seed.into()).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportions_append_entropy() {
        let out = proportions(&[1.0, 0.0, 1.0], &[0.0, 5.0, 0.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-9 && out[1] == 0.0);
        assert!((out[3] - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn simulation_reports_every_slice() {
        let v: serde_json::Value = serde_json::from_str(&simulate(5, 4, 0.5, 1.0, false, 3).unwrap()).unwrap();
        assert_eq!(v["pi"].as_array().unwrap().len(), 4);
        assert_eq!(v["used"][0].as_array().unwrap().len(), 5);
        let coupled: serde_json::Value = serde_json::from_str(&simulate(5, 4, 0.5, 1.0, true, 3).unwrap()).unwrap();
        assert_eq!(coupled["used"][2][1], 1.0);
    }

    #[test]
    fn histogram_mass_sums_to_one_and_matches_q() {
        let h = concrete_histogram(0.3, 0.1, 20_000, 2, 1).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((h[1] - 0.3).abs() < 0.02, "{h:?}");
    }
}
