//! Single-hidden-layer tanh networks and seeded parameter initialization.

use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normals, stream};

/// Stable 64-bit key for a parameter name.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `N(0, std^2)` entries drawn from a stream keyed by `(seed, name)`.
pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = normals(&mut stream(seed, &[name_key(name)]), n)
        .into_iter()
        .map(|z| z * std)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Parameter names of `x -> tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl Mlp {
    pub fn named(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        }
    }

    /// Scaled-normal weights, zero biases; `out_gain` shrinks the output layer.
    pub fn register(
        &self,
        store: &mut ParameterStore,
        dims: (usize, usize, usize),
        seed: u64,
        out_gain: f64,
    ) -> Result<()> {
        let (input, hidden, output) = dims;
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = out_gain * (1.0 / hidden as f64).sqrt();
        store.insert(&self.w1, normal_tensor(seed, &self.w1, &[input, hidden], s1))?;
        store.insert(&self.b1, Tensor::zeros(&[hidden]))?;
        store.insert(&self.w2, normal_tensor(seed, &self.w2, &[hidden, output], s2))?;
        store.insert(&self.b2, Tensor::zeros(&[output]))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, &self.w1)?;
        let b1 = tape.param(store, &self.b1)?;
        let w2 = tape.param(store, &self.w2)?;
        let b2 = tape.param(store, &self.b2)?;
        let pre = tape.affine(x, w1, b1)?;
        let h = tape.tanh(pre)?;
        tape.affine(h, w2, b2)
    }

    pub fn forward_plain(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        mlp_plain(
            store.get(&self.w1)?,
            store.get(&self.b1)?,
            store.get(&self.w2)?,
            store.get(&self.b2)?,
            x,
        )
    }
}

/// `y = b + x W` for a single row.
pub fn affine_plain(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if w.shape().len() != 2 || w.rows() != x.len() || b.len() != w.cols() {
        return Err(Error::shape(
            "affine_plain",
            &[&[x.len()], w.shape(), b.shape()],
        ));
    }
    let n = w.cols();
    let mut y = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w.data()[i * n..(i + 1) * n];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    Ok(y)
}

pub fn mlp_plain(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let h: Vec<f64> = affine_plain(x, w1, b1)?.into_iter().map(f64::tanh).collect();
    affine_plain(&h, w2, b2)
}
