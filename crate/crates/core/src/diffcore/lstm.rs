use super::store::ParameterStore;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Names of the three tensors of one LSTM layer inside a [`ParameterStore`].
///
/// Gate order along the `4H` axis is input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmWeights {
    /// `input x 4H`
    pub w_input: String,
    /// `H x 4H`
    pub w_hidden: String,
    /// `4H`
    pub bias: String,
}

impl LstmWeights {
    pub fn named(prefix: &str) -> Self {
        Self {
            w_input: format!("{prefix}.w_input"),
            w_hidden: format!("{prefix}.w_hidden"),
            bias: format!("{prefix}.bias"),
        }
    }

    pub fn register(
        &self,
        store: &mut ParameterStore,
        input: usize,
        hidden: usize,
        init: &mut impl FnMut(&[usize], usize) -> Tensor,
    ) -> Result<()> {
        store.insert(&self.w_input, init(&[input, 4 * hidden], input))?;
        store.insert(&self.w_hidden, init(&[hidden, 4 * hidden], hidden))?;
        // Forget-gate bias starts at 1 so early cells keep their state.
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        store.insert(&self.bias, Tensor::vector(bias))
    }

    pub fn hidden_size(&self, store: &ParameterStore) -> Result<usize> {
        Ok(store.get(&self.w_hidden)?.rows())
    }
}

/// One LSTM step for a batch of rows: returns `(h, c)`.
pub fn lstm_cell(
    tape: &mut Tape,
    store: &ParameterStore,
    weights: &LstmWeights,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let w_in = tape.param(store, &weights.w_input)?;
    let w_h = tape.param(store, &weights.w_hidden)?;
    let bias = tape.param(store, &weights.bias)?;
    let hidden = tape.value(w_h).rows();
    if tape.value(h_prev).cols() != hidden || tape.value(c_prev).shape() != tape.value(h_prev).shape()
    {
        return Err(Error::shape(
            "lstm_cell",
            &[
                tape.value(x).shape(),
                tape.value(h_prev).shape(),
                tape.value(c_prev).shape(),
            ],
        ));
    }

    let from_x = tape.affine(x, w_in, bias)?;
    let from_h = tape.matmul(h_prev, w_h)?;
    let gates = tape.add(from_x, from_h)?;

    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c)?;
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}
