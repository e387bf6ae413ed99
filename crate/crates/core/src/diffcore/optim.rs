use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tape::Gradients;
use crate::error::{Error, Result};

/// Adaptive-moment (Adam) hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clip applied before the update. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    /// A gradient component was NaN or infinite; nothing was changed.
    Skipped,
}

pub fn adam_step(
    store: &mut ParameterStore,
    grads: &Gradients,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.tensors().len() != store.len()
        || grads
            .iter()
            .zip(store.slots())
            .any(|((n, g), s)| n != s.name || g.shape() != s.value.shape())
    {
        return Err(Error::Config(
            "gradient set does not match the parameter store".into(),
        ));
    }
    if !grads.is_finite() {
        log::warn!(
            "non-finite gradient at step {}; update skipped",
            store.step() + 1
        );
        return Ok(StepOutcome::Skipped);
    }

    let grad_norm = grads.global_norm();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    let t = store.increment_step() as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, g) in store.slots_mut().iter_mut().zip(grads.tensors()) {
        let value = slot.value.data_mut();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for i in 0..value.len() {
            let gi = g.data()[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(StepOutcome::Applied {
        grad_norm,
        clipped: scale < 1.0,
    })
}

/// Scale `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.tensors_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn one_param(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(v)).unwrap();
        s
    }

    fn grads_of(store: &ParameterStore, vals: &[f64]) -> Gradients {
        let mut g = Gradients::zeros_like(store);
        g.tensors_mut()[0].data_mut().copy_from_slice(vals);
        g
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = one_param(1.5);
        let g = grads_of(&s, &[0.0]);
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected moments on step one are m_hat = g, v_hat = g^2, so the
        // update is lr * g / (|g| + eps).
        let mut s = one_param(0.0);
        let g = grads_of(&s, &[1.0]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            clip_norm: None,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &g, &cfg).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get("x").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut g = grads_of(&s, &[6.0, 8.0]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut s = one_param(2.0);
        let g = grads_of(&s, &[f64::NAN]);
        let out = adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(s.get("x").unwrap().item(), 2.0);
        assert_eq!(s.step(), 0);
    }
}
