//! Branch feature distillation and the classifier head: per-branch affine +
//! ReLU transforms, element-wise max pooling across the K branches, feature
//! concatenation by mode, and softmax classification.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{he_normal, zeros, Binder, Params};

/// Which features feed the classifier: synthetic only, real + synthetic, or
/// real + synthetic + text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    S,
    RS,
    RST,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::S, Mode::RS, Mode::RST];

    pub fn uses_real(self) -> bool {
        matches!(self, Mode::RS | Mode::RST)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Mode::RST)
    }

    /// Combined feature width for the given component dims.
    pub fn combined_dim(self, d: usize, h: usize, t: usize) -> usize {
        match self {
            Mode::S => h,
            Mode::RS => d + h,
            Mode::RST => d + h + t,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::S => "S",
            Mode::RS => "RS",
            Mode::RST => "RST",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Mode::S),
            "RS" | "rs" => Ok(Mode::RS),
            "RST" | "rst" => Ok(Mode::RST),
            other => Err(Error::config(format!(
                "unknown mode {other:?}; expected S, RS, or RST"
            ))),
        }
    }
}

/// Initializes the K per-branch transforms `fusion.<k>.{w,b}`: `W_k` of
/// shape `[d, h]` and `b_k` of shape `[h]`.
pub fn init_fusion(d: usize, h: usize, k: usize, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    for ki in 0..k {
        p.insert(format!("fusion.{ki}.w"), he_normal(&[d, h], d, rng));
        p.insert(format!("fusion.{ki}.b"), zeros(&[h]));
    }
    p
}

/// Initializes one classifier head per mode under `head.<mode>.{w,b}`.
pub fn init_heads(d: usize, h: usize, t: usize, classes: usize, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    for mode in Mode::ALL {
        let dim = mode.combined_dim(d, h, t);
        p.insert(format!("head.{mode}.w"), he_normal(&[dim, classes], dim, rng));
        p.insert(format!("head.{mode}.b"), zeros(&[classes]));
    }
    p
}

/// `ReLU(W_k x + b_k)` for branch `k` over pooled features `[B, d]`.
pub fn branch_transform(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    pooled: NodeId,
    k: usize,
) -> Result<NodeId> {
    let wname = format!("fusion.{k}.w");
    let w = params
        .get(&wname)
        .ok_or_else(|| Error::config(format!("no branch transform {k}")))?;
    let d_in = tape.value(pooled).shape()[1];
    if w.shape()[0] != d_in {
        return Err(Error::shape(format!(
            "branch {k} expects input dim {}, got {d_in}",
            w.shape()[0]
        )));
    }
    let w = binder.get(tape, params, &wname);
    let b = binder.get(tape, params, &format!("fusion.{k}.b"));
    let lin = tape.dense(pooled, w, b);
    Ok(tape.relu(lin))
}

/// Coordinate-wise maximum over the K branch features.
pub fn fuse_max(tape: &mut Tape, branches: &[NodeId]) -> Result<NodeId> {
    if branches.is_empty() {
        return Err(Error::config("fuse_max needs at least one branch"));
    }
    let shape = tape.value(branches[0]).shape().to_vec();
    for &b in branches {
        if tape.value(b).shape() != &shape[..] {
            return Err(Error::shape("branch feature dims differ"));
        }
    }
    Ok(tape.max_many(branches))
}

/// Fixed-order concatenation for the requested mode.
pub fn combine(
    tape: &mut Tape,
    mode: Mode,
    v_x: Option<NodeId>,
    v_s: NodeId,
    v_t: Option<NodeId>,
) -> Result<NodeId> {
    match mode {
        Mode::S => Ok(v_s),
        Mode::RS => {
            let vx = v_x.ok_or_else(|| Error::config("mode RS needs the real-image feature"))?;
            Ok(tape.concat(1, &[vx, v_s]))
        }
        Mode::RST => {
            let vx = v_x.ok_or_else(|| Error::config("mode RST needs the real-image feature"))?;
            let vt = v_t.ok_or_else(|| Error::config("mode RST needs the text feature"))?;
            Ok(tape.concat(1, &[vx, v_s, vt]))
        }
    }
}

/// Class logits of the mode head.
pub fn head_logits(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    mode: Mode,
    combined: NodeId,
) -> Result<NodeId> {
    let wname = format!("head.{mode}.w");
    let dim = tape.value(combined).shape()[1];
    let w = params
        .get(&wname)
        .ok_or_else(|| Error::config(format!("no head for mode {mode}")))?;
    if w.shape()[0] != dim {
        return Err(Error::shape(format!(
            "head {mode} expects dim {}, got {dim}",
            w.shape()[0]
        )));
    }
    let w = binder.get(tape, params, &wname);
    let b = binder.get(tape, params, &format!("head.{mode}.b"));
    Ok(tape.dense(combined, w, b))
}

/// Softmax probabilities of logits, computed off-tape.
pub fn softmax_probs(logits: &Array2<f64>) -> Array2<f64> {
    let (b, c) = logits.dim();
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        let row = logits.row(bi);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for ci in 0..c {
            out[(bi, ci)] = exps[ci] / z;
        }
    }
    out
}

/// Mean cross-entropy `-ln p[label]` over the batch, on the tape.
pub fn xent_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let c = tape.value(logits).shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::data(format!("label {bad} out of range 0..{c}")));
    }
    if labels.len() != tape.value(logits).shape()[0] {
        return Err(Error::shape("label count != batch size"));
    }
    let per = tape.softmax_xent(logits, labels);
    Ok(tape.mean(per))
}

/// Predicted class per row: argmax of logits, lowest index on ties.
pub fn predict(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            arg
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::rng::stream;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::Rng;

    #[test]
    fn branch_transform_identity_and_clipping() {
        let mut p = Params::new();
        p.insert("fusion.0.w", arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        p.insert("fusion.0.b", arr1(&[0.0, 0.0]).into_dyn());
        p.insert("fusion.1.w", arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        p.insert("fusion.1.b", arr1(&[-100.0, -100.0]).into_dyn());
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(arr2(&[[0.3, 1.2]]).into_dyn());
        let id = branch_transform(&mut tape, &mut binder, &p, x, 0).unwrap();
        assert_eq!(tape.value(id), &arr2(&[[0.3, 1.2]]).into_dyn());
        let clipped = branch_transform(&mut tape, &mut binder, &p, x, 1).unwrap();
        assert_eq!(tape.value(clipped), &arr2(&[[0.0, 0.0]]).into_dyn());
    }

    #[test]
    fn branch_transform_direct_arithmetic() {
        // W = [[1,2],[3,4]], b = [1,-10], x = [1,1] -> ReLU([w col dot x] + b)
        // x W = [1+3, 2+4] = [4, 6]; + b = [5, -4] ... with W as [d, h] layout
        // the hand case from the contract uses W x; store W transposed.
        let mut p = Params::new();
        p.insert("fusion.0.w", arr2(&[[1.0, 3.0], [2.0, 4.0]]).into_dyn());
        p.insert("fusion.0.b", arr1(&[1.0, -10.0]).into_dyn());
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(arr2(&[[1.0, 1.0]]).into_dyn());
        let out = branch_transform(&mut tape, &mut binder, &p, x, 0).unwrap();
        assert_eq!(tape.value(out), &arr2(&[[4.0, 0.0]]).into_dyn());
    }

    #[test]
    fn fuse_max_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 0.0, 2.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[0.0, 3.0, 2.0]]).into_dyn());
        let m = fuse_max(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(m), &arr2(&[[1.0, 3.0, 2.0]]).into_dyn());
        // K = 1 identity
        let single = fuse_max(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        // empty input
        assert!(fuse_max(&mut tape, &[]).is_err());
    }

    #[test]
    fn fuse_max_monotone_under_branch_addition() {
        let mut rng = stream(1, 0);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let k = rng.random_range(1..5usize);
            let dims = 6usize;
            let branches: Vec<NodeId> = (0..k)
                .map(|_| {
                    tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, dims]), |_| {
                        rng.random_range(-2.0..2.0)
                    }))
                })
                .collect();
            let base = fuse_max(&mut tape, &branches).unwrap();
            let base_v = tape.value(base).clone();
            let extra = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, dims]), |_| {
                rng.random_range(-2.0..2.0)
            }));
            let mut extended = branches.clone();
            extended.push(extra);
            let bigger = fuse_max(&mut tape, &extended).unwrap();
            for (lo, hi) in base_v.iter().zip(tape.value(bigger).iter()) {
                assert!(hi >= lo);
            }
        }
    }

    #[test]
    fn tied_transforms_are_permutation_invariant() {
        let mut rng = stream(2, 0);
        let d = 4;
        let h = 3;
        let k = 4;
        // tie all branches to branch 0's parameters
        let mut p = init_fusion(d, h, 1, &mut rng);
        let w0 = p.expect("fusion.0.w").clone();
        let b0 = p.expect("fusion.0.b").clone();
        for ki in 1..k {
            p.insert(format!("fusion.{ki}.w"), w0.clone());
            p.insert(format!("fusion.{ki}.b"), b0.clone());
        }
        let feats: Vec<ArrayD<f64>> = (0..k)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[2, d]), |_| rng.random_range(0.0..1.5)))
            .collect();

        let fused = |order: &[usize]| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let nodes: Vec<NodeId> = order
                .iter()
                .enumerate()
                .map(|(slot, &src)| {
                    let x = tape.leaf(feats[src].clone());
                    branch_transform(&mut tape, &mut binder, &p, x, slot).unwrap()
                })
                .collect();
            let m = fuse_max(&mut tape, &nodes).unwrap();
            tape.value(m).clone()
        };
        let a = fused(&[0, 1, 2, 3]);
        for order in [[1usize, 0, 3, 2], [3, 2, 1, 0], [2, 3, 0, 1]] {
            assert_eq!(a, fused(&order));
        }
    }

    #[test]
    fn combine_dims_and_prefix_contract() {
        let (d, h, t) = (5usize, 3usize, 4usize);
        let mut tape = Tape::new();
        let vx = tape.leaf(Array2::from_shape_fn((1, d), |(_, j)| j as f64).into_dyn());
        let vs = tape.leaf(Array2::from_shape_fn((1, h), |(_, j)| 10.0 + j as f64).into_dyn());
        let vt = tape.leaf(Array2::from_shape_fn((1, t), |(_, j)| 20.0 + j as f64).into_dyn());

        let s = combine(&mut tape, Mode::S, None, vs, None).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, h]);
        let rs = combine(&mut tape, Mode::RS, Some(vx), vs, None).unwrap();
        assert_eq!(tape.value(rs).shape(), &[1, d + h]);
        let rst = combine(&mut tape, Mode::RST, Some(vx), vs, Some(vt)).unwrap();
        assert_eq!(tape.value(rst).shape(), &[1, d + h + t]);
        // RS is a prefix of RST on the same bundle
        let rsv = tape.value(rs).clone();
        let rstv = tape.value(rst).clone();
        for j in 0..(d + h) {
            assert_eq!(rsv[[0, j]], rstv[[0, j]]);
        }
        // missing components error
        assert!(combine(&mut tape, Mode::RS, None, vs, None).is_err());
        assert!(combine(&mut tape, Mode::RST, Some(vx), vs, None).is_err());
    }

    #[test]
    fn classifier_uniform_and_hand_values() {
        // zero weights and biases: uniform probabilities, loss ln C
        let classes = 5;
        let mut p = Params::new();
        p.insert("head.S.w", ArrayD::zeros(IxDyn(&[3, classes])));
        p.insert("head.S.b", ArrayD::zeros(IxDyn(&[classes])));
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let vs = tape.leaf(arr2(&[[0.5, 1.0, 0.2]]).into_dyn());
        let logits = head_logits(&mut tape, &mut binder, &p, Mode::S, vs).unwrap();
        let probs = softmax_probs(
            &tape.value(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned(),
        );
        for j in 0..classes {
            assert!((probs[[0, j]] - 0.2).abs() < 1e-12);
        }
        assert!((probs.row(0).sum() - 1.0).abs() < 1e-9);
        let loss = xent_loss(&mut tape, logits, &[3]).unwrap();
        assert!((tape.scalar(loss) - (classes as f64).ln()).abs() < 1e-9);

        // logits [2, 0], label 0 -> ln(1 + e^-2)
        let mut tape = Tape::new();
        let logits = tape.leaf(arr2(&[[2.0, 0.0]]).into_dyn());
        let loss = xent_loss(&mut tape, logits, &[0]).unwrap();
        assert!((tape.scalar(loss) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(arr2(&[[0.1, 0.2]]).into_dyn());
        assert!(xent_loss(&mut tape, logits, &[2]).is_err());
    }

    #[test]
    fn argmax_stable_under_positive_scaling() {
        let mut rng = stream(3, 0);
        for _ in 0..200 {
            let logits =
                Array2::from_shape_fn((3, 6), |_| rng.random_range(-3.0..3.0f64));
            let scaled = logits.mapv(|v| v * 7.3);
            assert_eq!(predict(&logits), predict(&scaled));
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        // branch_transform -> fuse_max -> concat -> head -> xent
        let (d, h, t, k, classes) = (3usize, 3usize, 2usize, 3usize, 4usize);
        let mut rng = stream(4, 0);
        let mut params = init_fusion(d, h, k, &mut rng);
        params.absorb(init_heads(d, h, t, classes, &mut rng));
        // bias away from zero so ReLU inputs avoid the kink
        for ki in 0..k {
            *params.get_mut(&format!("fusion.{ki}.b")).unwrap() =
                crate::params::normal(&[h], 0.5, &mut rng);
        }
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        let mut r = stream(5, 0);
        // inputs: pooled features per branch + vx + vt, then parameters
        let mut inputs: Vec<ArrayD<f64>> = (0..k)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[2, d]), |_| r.random_range(0.1..1.0)))
            .collect();
        inputs.push(ArrayD::from_shape_fn(IxDyn(&[2, d]), |_| r.random_range(0.1..1.0)));
        inputs.push(ArrayD::from_shape_fn(IxDyn(&[2, t]), |_| r.random_range(0.1..1.0)));
        inputs.extend(names.iter().map(|n| params.expect(n).clone()));
        let labels = vec![1usize, 3];

        let res = check_gradients(
            |tape, leaves| {
                let mut p = Params::new();
                let mut binder = Binder::new();
                for (name, &leaf) in names.iter().zip(leaves[k + 2..].iter()) {
                    p.insert(name.clone(), tape.value(leaf).clone());
                    binder.insert_bound(name, leaf);
                }
                let branches: Vec<NodeId> = (0..k)
                    .map(|ki| branch_transform(tape, &mut binder, &p, leaves[ki], ki).unwrap())
                    .collect();
                let vs = fuse_max(tape, &branches).unwrap();
                let cat = combine(tape, Mode::RST, Some(leaves[k]), vs, Some(leaves[k + 1])).unwrap();
                let logits = head_logits(tape, &mut binder, &p, Mode::RST, cat).unwrap();
                xent_loss(tape, logits, &labels).unwrap()
            },
            &inputs,
            1e-5,
            1e-4,
            Some(40),
            29,
        );
        assert!(res.max_rel_err < 1e-4, "rel err {}", res.max_rel_err);
    }
}
