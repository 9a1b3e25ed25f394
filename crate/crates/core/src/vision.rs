//! Visual backbone: a small residual convnet producing a spatial feature
//! map and its globally averaged pooled vector, used for both real and
//! synthetic images.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{he_normal, zeros, Binder, Params};

/// Backbone dimensions. Three stride-2 residual blocks reduce `input` by 8x,
/// so the output map is `(input/8) x (input/8) x channels[2]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VisionConfig {
    pub input: usize,
    pub channels: [usize; 3],
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            input: 32,
            channels: [16, 32, 64],
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input % 8 != 0 || self.input < 8 {
            return Err(Error::config(format!(
                "backbone input {} must be a multiple of 8",
                self.input
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone channels must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the output map.
    pub fn grid(&self) -> usize {
        self.input / 8
    }

    /// Feature dimension `d` of the pooled vector.
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }
}

/// Initializes `backbone.*` parameters: three residual blocks, each a
/// stride-2 3x3 conv, a 3x3 conv, and a stride-2 1x1 projection shortcut.
pub fn init_backbone(cfg: &VisionConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    cfg.validate()?;
    let mut p = Params::new();
    let mut cin = 3usize;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        p.insert(
            format!("backbone.block{i}.conv1.w"),
            he_normal(&[cout, cin, 3, 3], cin * 9, rng),
        );
        p.insert(format!("backbone.block{i}.conv1.b"), zeros(&[cout]));
        p.insert(
            format!("backbone.block{i}.conv2.w"),
            he_normal(&[cout, cout, 3, 3], cout * 9, rng),
        );
        p.insert(format!("backbone.block{i}.conv2.b"), zeros(&[cout]));
        p.insert(
            format!("backbone.block{i}.skip.w"),
            he_normal(&[cout, cin, 1, 1], cin, rng),
        );
        p.insert(format!("backbone.block{i}.skip.b"), zeros(&[cout]));
        cin = cout;
    }
    Ok(p)
}

/// Feature map and pooled vector of one forward pass.
pub struct BackboneNodes {
    /// `[B, d, g, g]`, non-negative (post-ReLU).
    pub map: NodeId,
    /// `[B, d]`, the spatial mean of `map`.
    pub pooled: NodeId,
}

/// Runs the backbone on `[B, 3, input, input]` images in `[-1, 1]`.
pub fn backbone_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    cfg: &VisionConfig,
    images: NodeId,
) -> Result<BackboneNodes> {
    let shape = tape.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input || shape[3] != cfg.input {
        return Err(Error::shape(format!(
            "backbone expects [B, 3, {s}, {s}], got {shape:?}",
            s = cfg.input
        )));
    }
    let mut x = images;
    for i in 0..3 {
        let w1 = binder.get(tape, params, &format!("backbone.block{i}.conv1.w"));
        let b1 = binder.get(tape, params, &format!("backbone.block{i}.conv1.b"));
        let c1 = tape.conv2d(x, w1, 2, 1);
        let c1 = tape.add_chan_bias(c1, b1);
        let a1 = tape.relu(c1);

        let w2 = binder.get(tape, params, &format!("backbone.block{i}.conv2.w"));
        let b2 = binder.get(tape, params, &format!("backbone.block{i}.conv2.b"));
        let c2 = tape.conv2d(a1, w2, 1, 1);
        let c2 = tape.add_chan_bias(c2, b2);

        let ws = binder.get(tape, params, &format!("backbone.block{i}.skip.w"));
        let bs = binder.get(tape, params, &format!("backbone.block{i}.skip.b"));
        let sk = tape.conv2d(x, ws, 2, 0);
        let sk = tape.add_chan_bias(sk, bs);

        let sum = tape.add(c2, sk);
        x = tape.relu(sum);
    }
    let pooled = tape.avg_pool_all(x);
    Ok(BackboneNodes { map: x, pooled })
}

/// The visual feature of a real image: the backbone's pooled vector.
pub fn extract_real_feature(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    cfg: &VisionConfig,
    images: NodeId,
) -> Result<NodeId> {
    Ok(backbone_forward(tape, binder, params, cfg, images)?.pooled)
}

/// Convenience: pooled features of a batch without keeping the tape.
pub fn pooled_features(
    params: &Params,
    cfg: &VisionConfig,
    images: &ArrayD<f64>,
) -> Result<ndarray::Array2<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let x = tape.leaf(images.clone());
    let out = backbone_forward(&mut tape, &mut binder, params, cfg, x)?;
    Ok(tape
        .value(out.pooled)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}
