//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numerical side only ever calls the forward pass, so it stays
//! independent of the backward rules it is checking.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences.
///
/// `build` must construct the graph from scratch given leaves for `inputs`
/// and return the scalar output node. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, floor)`; `floor` guards coordinates whose true
/// gradient is negligibly small. When `max_coords` is set, at most that many
/// coordinates per input are probed (chosen by a seeded shuffle).
pub fn check_gradients<F>(
    mut build: F,
    inputs: &[ArrayD<f64>],
    eps: f64,
    floor: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> CheckResult
where
    F: FnMut(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |build: &mut F, xs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.scalar(out)
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &ids);
    let mut grads = tape.backward(out);
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| ArrayD::zeros(tape.value(id).shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();

    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(cap) = max_coords {
            if n > cap {
                coords.shuffle(&mut rng);
                coords.truncate(cap);
            }
        }
        for &j in &coords {
            let orig = xs[i].as_slice().unwrap()[j];
            xs[i].as_slice_mut().unwrap()[j] = orig + eps;
            let fp = eval(&mut build, &xs);
            xs[i].as_slice_mut().unwrap()[j] = orig - eps;
            let fm = eval(&mut build, &xs);
            xs[i].as_slice_mut().unwrap()[j] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].as_slice().unwrap()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    CheckResult { max_rel_err, checked }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_passes() {
        let x = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let res = check_gradients(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0]);
                t.sum(sq)
            },
            &[x],
            1e-5,
            1e-4,
            None,
            0,
        );
        assert!(res.max_rel_err < 1e-6, "rel err {}", res.max_rel_err);
        assert_eq!(res.checked, 3);
    }

    #[test]
    fn broken_gradient_is_caught() {
        // tanh forward with a deliberately mismatched backward: build a graph
        // whose analytic gradient differs (uses sigmoid instead of tanh).
        let x = arr1(&[0.5]).into_dyn();
        let mut flip = false;
        let res = check_gradients(
            |t, ids| {
                // alternate between tanh (analytic pass) and sigmoid (fd evals)
                let y = if flip { t.sigmoid(ids[0]) } else { t.tanh(ids[0]) };
                flip = true;
                t.sum(y)
            },
            &[x],
            1e-5,
            1e-4,
            None,
            0,
        );
        assert!(res.max_rel_err > 1e-2);
    }
}
