use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Upper bound on coordinates probed; all coordinates when the store is smaller.
    pub max_coordinates: usize,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coordinates: 2000,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare tape gradients with central differences.
///
/// `build` must be deterministic for a given store (noise frozen by the
/// caller) and return the scalar output node.
pub fn gradient_check<F>(
    mut build: F,
    store: &ParameterStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<(Tape, Var)>,
{
    let (tape, out) = build(store)?;
    let grads = tape.backward(out, store)?;

    let coords: Vec<(usize, usize)> = store
        .slots()
        .iter()
        .enumerate()
        .flat_map(|(s, slot)| (0..slot.value.len()).map(move |i| (s, i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.max_coordinates {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.max_coordinates).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for ci in chosen {
        let (s, i) = coords[ci];
        let name = store.slots()[s].name.clone();
        let original = store.slots()[s].value.data()[i];

        probe.get_mut(&name)?.data_mut()[i] = original + opts.epsilon;
        let (t_plus, o_plus) = build(&probe)?;
        probe.get_mut(&name)?.data_mut()[i] = original - opts.epsilon;
        let (t_minus, o_minus) = build(&probe)?;
        probe.get_mut(&name)?.data_mut()[i] = original;

        let numeric =
            (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * opts.epsilon);
        let analytic = grads.tensors()[s].data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel;
            report.worst = Some((name, i, analytic, numeric));
        }
    }
    Ok(report)
}
