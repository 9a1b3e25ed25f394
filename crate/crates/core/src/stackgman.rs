//! The K-branch, multi-stage conditional GAN: a generator tree that emits
//! one image per stage scale for each of K noise branches, one
//! discriminator per stage with unconditional and conditional scoring
//! heads, and the joint objectives both sides optimize.
//!
//! In tied mode the K branches share one parameter set per stage and
//! diversity comes solely from the noise vectors; untied mode keeps K
//! copies of every generator stage (discriminators are always shared).

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{he_normal, zeros, Binder, Params};
use crate::textenc::{self, TextConfig, Vocabulary};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before any logarithm.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Negative slope of the discriminator activations.
const D_SLOPE: f64 = 0.2;

/// Shape of the generator/discriminator tree.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    /// Number of stages `m`.
    pub stages: usize,
    /// Spatial size per stage, strictly doubling.
    pub scales: Vec<usize>,
    /// Branches `K`.
    pub branches: usize,
    pub z_dim: usize,
    /// Generator trunk channels.
    pub g_ch: usize,
    /// Discriminator base channels.
    pub d_ch: usize,
    pub tied_weights: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            scales: vec![8, 16, 32],
            branches: 5,
            z_dim: 16,
            g_ch: 32,
            d_ch: 16,
            tied_weights: true,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("need at least one stage"));
        }
        if self.scales.len() != self.stages {
            return Err(Error::config(format!(
                "scales {:?} must have one entry per stage ({})",
                self.scales, self.stages
            )));
        }
        if self.scales[0] < 4 {
            return Err(Error::config("coarsest scale must be at least 4"));
        }
        for win in self.scales.windows(2) {
            if win[1] != 2 * win[0] {
                return Err(Error::config(format!(
                    "stage scales must double, got {:?}",
                    self.scales
                )));
            }
        }
        if self.branches == 0 {
            return Err(Error::config("need at least one branch"));
        }
        if self.z_dim == 0 || self.g_ch == 0 || self.d_ch == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        Ok(())
    }

    pub fn finest_scale(&self) -> usize {
        *self.scales.last().unwrap()
    }

    /// Discriminator trunk plan for one stage: (in_ch, out_ch, stride) per
    /// conv, downsampling until the map is 4x4.
    fn disc_plan(&self, stage: usize) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut size = self.scales[stage];
        let mut ch_in = 3;
        let mut ch_out = self.d_ch;
        if size == 4 {
            return vec![(3, self.d_ch, 1)];
        }
        while size > 4 {
            plan.push((ch_in, ch_out, 2));
            size /= 2;
            ch_in = ch_out;
            ch_out *= 2;
        }
        plan
    }

    fn disc_trunk_channels(&self, stage: usize) -> usize {
        self.disc_plan(stage).last().unwrap().1
    }
}

/// One standard-normal noise vector for branch `branch`.
#[derive(Clone, Debug)]
pub struct NoiseVector {
    pub values: Array1<f64>,
    pub branch: usize,
}

/// K independent standard-normal vectors, deterministic under the rng.
pub fn sample_noise(k: usize, z_dim: usize, rng: &mut ChaCha8Rng) -> Vec<NoiseVector> {
    (0..k)
        .map(|branch| NoiseVector {
            values: Array1::from_shape_fn(z_dim, |_| rng.sample(rand_distr::StandardNormal)),
            branch,
        })
        .collect()
}

/// Batched noise: one `[B, z_dim]` matrix per branch.
pub fn sample_noise_batch(
    b: usize,
    k: usize,
    z_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Array2<f64>> {
    (0..k)
        .map(|_| Array2::from_shape_fn((b, z_dim), |_| rng.sample(rand_distr::StandardNormal)))
        .collect()
}

/// Parameter name for a generator tensor, branch-qualified in untied mode.
fn gname(cfg: &StageConfig, family: &str, stage: usize, branch: usize, leaf: &str) -> String {
    if cfg.tied_weights {
        format!("{family}.{stage}.{leaf}")
    } else {
        format!("{family}.{stage}.{branch}.{leaf}")
    }
}

/// GAN parameters plus the conditioning width they were built for.
#[derive(Clone, Debug)]
pub struct GmanModel {
    pub cfg: StageConfig,
    pub c_dim: usize,
    pub params: Params,
}

/// Initializes generator and discriminator parameters. Discriminator output
/// heads start at zero so every score is exactly 0.5 before training.
pub fn init_gman(cfg: &StageConfig, c_dim: usize, rng: &mut ChaCha8Rng) -> Result<GmanModel> {
    cfg.validate()?;
    let mut p = Params::new();
    let branches = if cfg.tied_weights { 1 } else { cfg.branches };
    let s0 = cfg.scales[0];

    for k in 0..branches {
        // stem: (c, z) -> g_ch x s0 x s0
        let stem_in = c_dim + cfg.z_dim;
        let stem_out = cfg.g_ch * s0 * s0;
        p.insert(
            gname(cfg, "F", 0, k, "w"),
            he_normal(&[stem_in, stem_out], stem_in, rng),
        );
        p.insert(gname(cfg, "F", 0, k, "b"), zeros(&[stem_out]));
        for stage in 1..cfg.stages {
            let cin = cfg.g_ch + c_dim;
            p.insert(
                gname(cfg, "F", stage, k, "w"),
                he_normal(&[cfg.g_ch, cin, 3, 3], cin * 9, rng),
            );
            p.insert(gname(cfg, "F", stage, k, "b"), zeros(&[cfg.g_ch]));
        }
        for stage in 0..cfg.stages {
            p.insert(
                gname(cfg, "G", stage, k, "w"),
                he_normal(&[3, cfg.g_ch, 3, 3], cfg.g_ch * 9, rng),
            );
            p.insert(gname(cfg, "G", stage, k, "b"), zeros(&[3]));
        }
    }

    for stage in 0..cfg.stages {
        for (j, (cin, cout, _)) in cfg.disc_plan(stage).iter().enumerate() {
            p.insert(
                format!("D.{stage}.conv{j}.w"),
                he_normal(&[*cout, *cin, 3, 3], cin * 9, rng),
            );
            p.insert(format!("D.{stage}.conv{j}.b"), zeros(&[*cout]));
        }
        let trunk_ch = cfg.disc_trunk_channels(stage);
        let flat = trunk_ch * 16;
        p.insert(format!("D.{stage}.uncond.w"), zeros(&[flat, 1]));
        p.insert(format!("D.{stage}.uncond.b"), zeros(&[1]));
        let proj_in = trunk_ch + c_dim;
        p.insert(
            format!("D.{stage}.cond.proj.w"),
            he_normal(&[cfg.d_ch, proj_in, 1, 1], proj_in, rng),
        );
        p.insert(format!("D.{stage}.cond.proj.b"), zeros(&[cfg.d_ch]));
        p.insert(format!("D.{stage}.cond.out.w"), zeros(&[cfg.d_ch * 16, 1]));
        p.insert(format!("D.{stage}.cond.out.b"), zeros(&[1]));
    }

    Ok(GmanModel {
        cfg: cfg.clone(),
        c_dim,
        params: p,
    })
}

impl GmanModel {
    /// Total scalar count of generator parameters (`F.*` and `G.*`).
    pub fn generator_param_count(&self) -> usize {
        self.params.num_scalars_with_prefix("F.") + self.params.num_scalars_with_prefix("G.")
    }

    /// Total scalar count of discriminator parameters.
    pub fn discriminator_param_count(&self) -> usize {
        self.params.num_scalars_with_prefix("D.")
    }
}

/// Per-stage hidden features and images of one generator branch.
pub struct GenBranch {
    pub hidden: Vec<NodeId>,
    pub images: Vec<NodeId>,
}

/// Runs one branch of the generator tree.
///
/// The stem maps `(c, z)` onto the coarsest grid; each later stage
/// upsamples 2x, re-injects `c` as broadcast channels, and convolves. Every
/// stage has a tanh image head, so outputs live strictly inside `(-1, 1)`.
pub fn generator_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    model: &GmanModel,
    c: NodeId,
    z: NodeId,
    branch: usize,
) -> Result<GenBranch> {
    let cfg = &model.cfg;
    if branch >= cfg.branches {
        return Err(Error::config(format!(
            "branch {branch} out of range (K = {})",
            cfg.branches
        )));
    }
    let (bsz, zw) = {
        let zv = tape.value(z);
        (zv.shape()[0], zv.shape()[1])
    };
    let cw = tape.value(c).shape()[1];
    if zw != cfg.z_dim || cw != model.c_dim {
        return Err(Error::shape(format!(
            "conditioning/noise widths ({cw}, {zw}) do not match model ({}, {})",
            model.c_dim, cfg.z_dim
        )));
    }

    let p = &model.params;
    let s0 = cfg.scales[0];
    let cz = tape.concat(1, &[c, z]);
    let w0 = binder.get(tape, p, &gname(cfg, "F", 0, branch, "w"));
    let b0 = binder.get(tape, p, &gname(cfg, "F", 0, branch, "b"));
    let stem = tape.dense(cz, w0, b0);
    let stem = tape.relu(stem);
    let mut h = tape.reshape(stem, &[bsz, cfg.g_ch, s0, s0]);

    let mut hidden = vec![h];
    let mut images = Vec::new();
    for stage in 1..cfg.stages {
        let scale = cfg.scales[stage];
        let up = tape.upsample_nearest2(h);
        let cmap = tape.broadcast_spatial(c, scale, scale);
        let cat = tape.concat(1, &[up, cmap]);
        let w = binder.get(tape, p, &gname(cfg, "F", stage, branch, "w"));
        let b = binder.get(tape, p, &gname(cfg, "F", stage, branch, "b"));
        let conv = tape.conv2d(cat, w, 1, 1);
        let conv = tape.add_chan_bias(conv, b);
        h = tape.relu(conv);
        hidden.push(h);
    }
    for stage in 0..cfg.stages {
        let w = binder.get(tape, p, &gname(cfg, "G", stage, branch, "w"));
        let b = binder.get(tape, p, &gname(cfg, "G", stage, branch, "b"));
        let head = tape.conv2d(hidden[stage], w, 1, 1);
        let head = tape.add_chan_bias(head, b);
        images.push(tape.tanh(head));
    }
    Ok(GenBranch { hidden, images })
}

/// Runs the stage-`stage` discriminator on a batch of images with
/// conditioning `c`; returns `(p_uncond, p_cond)`, each `[B]` in `(0, 1)`.
pub fn discriminator_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    model: &GmanModel,
    image: NodeId,
    c: NodeId,
    stage: usize,
) -> Result<(NodeId, NodeId)> {
    let cfg = &model.cfg;
    if stage >= cfg.stages {
        return Err(Error::config(format!("stage {stage} out of range")));
    }
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.scales[stage] || shape[3] != cfg.scales[stage]
    {
        return Err(Error::shape(format!(
            "stage {stage} expects [B, 3, {s}, {s}], got {shape:?}",
            s = cfg.scales[stage]
        )));
    }
    let bsz = shape[0];
    let p = &model.params;

    let mut x = image;
    for (j, (_, _, stride)) in cfg.disc_plan(stage).iter().enumerate() {
        let w = binder.get(tape, p, &format!("D.{stage}.conv{j}.w"));
        let b = binder.get(tape, p, &format!("D.{stage}.conv{j}.b"));
        let conv = tape.conv2d(x, w, *stride, 1);
        let conv = tape.add_chan_bias(conv, b);
        x = tape.leaky_relu(conv, D_SLOPE);
    }
    let trunk_ch = cfg.disc_trunk_channels(stage);
    let flat = tape.reshape(x, &[bsz, trunk_ch * 16]);

    let uw = binder.get(tape, p, &format!("D.{stage}.uncond.w"));
    let ub = binder.get(tape, p, &format!("D.{stage}.uncond.b"));
    let ulogit = tape.dense(flat, uw, ub);
    let p_uncond = tape.sigmoid(ulogit);
    let p_uncond = tape.reshape(p_uncond, &[bsz]);

    let cmap = tape.broadcast_spatial(c, 4, 4);
    let cat = tape.concat(1, &[x, cmap]);
    let pw = binder.get(tape, p, &format!("D.{stage}.cond.proj.w"));
    let pb = binder.get(tape, p, &format!("D.{stage}.cond.proj.b"));
    let proj = tape.conv2d(cat, pw, 1, 0);
    let proj = tape.add_chan_bias(proj, pb);
    let proj = tape.leaky_relu(proj, D_SLOPE);
    let pflat = tape.reshape(proj, &[bsz, model.cfg.d_ch * 16]);
    let cw = binder.get(tape, p, &format!("D.{stage}.cond.out.w"));
    let cb = binder.get(tape, p, &format!("D.{stage}.cond.out.b"));
    let clogit = tape.dense(pflat, cw, cb);
    let p_cond = tape.sigmoid(clogit);
    let p_cond = tape.reshape(p_cond, &[bsz]);

    Ok((p_uncond, p_cond))
}

fn mean_log(tape: &mut Tape, scores: NodeId) -> NodeId {
    let clamped = tape.clamp(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let logs = tape.ln(clamped);
    tape.mean(logs)
}

fn mean_log_one_minus(tape: &mut Tape, scores: NodeId) -> NodeId {
    let neg = tape.neg(scores);
    let om = tape.add_scalar(neg, 1.0);
    let clamped = tape.clamp(om, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let logs = tape.ln(clamped);
    tape.mean(logs)
}

/// Stage-`i` discriminator objective over raw score nodes:
///
/// ```text
/// K E[ln D(x)] + sum_k E[ln(1 - D(s_k))] + K E[ln D(x, c)] + sum_k E[ln(1 - D(s_k, c))]
/// ```
///
/// The discriminator maximizes this; the optimizer minimizes its negation.
pub fn disc_objective_scores(
    tape: &mut Tape,
    real_uncond: NodeId,
    real_cond: NodeId,
    fake_uncond: &[NodeId],
    fake_cond: &[NodeId],
) -> Result<NodeId> {
    if fake_uncond.is_empty() || fake_uncond.len() != fake_cond.len() {
        return Err(Error::config("need one fake score batch per branch"));
    }
    if tape.value(real_uncond).is_empty() {
        return Err(Error::data("empty real batch"));
    }
    let k = fake_uncond.len() as f64;
    let ru = mean_log(tape, real_uncond);
    let rc = mean_log(tape, real_cond);
    let real = tape.add(ru, rc);
    let mut total = tape.mul_scalar(real, k);
    for (&fu, &fc) in fake_uncond.iter().zip(fake_cond.iter()) {
        if tape.value(fu).is_empty() {
            return Err(Error::data("empty fake batch"));
        }
        let lu = mean_log_one_minus(tape, fu);
        let lc = mean_log_one_minus(tape, fc);
        total = tape.add(total, lu);
        total = tape.add(total, lc);
    }
    Ok(total)
}

/// Generator objective over raw score nodes, summed across stages and
/// branches, plus the weighted KL term:
///
/// ```text
/// sum_i sum_k E[-ln D_i(s_i_k)] + sum_i sum_k E[-ln D_i(s_i_k, c)] + lambda_kl * kl
/// ```
pub fn gen_objective_scores(
    tape: &mut Tape,
    fake_uncond_by_stage: &[Vec<NodeId>],
    fake_cond_by_stage: &[Vec<NodeId>],
    kl: Option<NodeId>,
    lambda_kl: f64,
) -> Result<NodeId> {
    if fake_uncond_by_stage.is_empty() {
        return Err(Error::config("need at least one stage"));
    }
    let mut total: Option<NodeId> = None;
    for (fus, fcs) in fake_uncond_by_stage.iter().zip(fake_cond_by_stage.iter()) {
        if fus.is_empty() || fus.len() != fcs.len() {
            return Err(Error::config("need one fake score batch per branch"));
        }
        for (&fu, &fc) in fus.iter().zip(fcs.iter()) {
            let lu = mean_log(tape, fu);
            let lc = mean_log(tape, fc);
            let s = tape.add(lu, lc);
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
    }
    let mut loss = tape.neg(total.unwrap());
    if let Some(kl) = kl {
        if lambda_kl != 0.0 {
            let weighted = tape.mul_scalar(kl, lambda_kl);
            loss = tape.add(loss, weighted);
        }
    }
    Ok(loss)
}

/// Model-level stage objective: runs the discriminator on the real batch
/// and each (already detached) fake batch, then applies
/// [`disc_objective_scores`].
pub fn disc_objective(
    tape: &mut Tape,
    binder: &mut Binder,
    model: &GmanModel,
    real: NodeId,
    fakes: &[NodeId],
    c: NodeId,
    stage: usize,
) -> Result<NodeId> {
    let (ru, rc) = discriminator_forward(tape, binder, model, real, c, stage)?;
    let mut fu = Vec::new();
    let mut fc = Vec::new();
    for &f in fakes {
        let (u, cnd) = discriminator_forward(tape, binder, model, f, c, stage)?;
        fu.push(u);
        fc.push(cnd);
    }
    disc_objective_scores(tape, ru, rc, &fu, &fc)
}

/// Model-level generator objective over all stages and branches.
pub fn gen_objective(
    tape: &mut Tape,
    binder: &mut Binder,
    model: &GmanModel,
    fakes_by_stage: &[Vec<NodeId>],
    c: NodeId,
    kl: Option<NodeId>,
    lambda_kl: f64,
) -> Result<NodeId> {
    let mut fus = Vec::new();
    let mut fcs = Vec::new();
    for (stage, fakes) in fakes_by_stage.iter().enumerate() {
        let mut fu = Vec::new();
        let mut fc = Vec::new();
        for &f in fakes {
            let (u, cnd) = discriminator_forward(tape, binder, model, f, c, stage)?;
            fu.push(u);
            fc.push(cnd);
        }
        fus.push(fu);
        fcs.push(fc);
    }
    gen_objective_scores(tape, &fus, &fcs, kl, lambda_kl)
}

/// Deterministic caption-to-images synthesis: embeds the caption, samples
/// the conditioning and K noise vectors from `rng`, runs every branch, and
/// returns the K finest-scale images.
pub fn synthesize(
    caption: &str,
    k: usize,
    model: &GmanModel,
    text_params: &Params,
    text_cfg: &TextConfig,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Array3<f64>>> {
    if k == 0 || k > model.cfg.branches {
        return Err(Error::config(format!(
            "k = {k} out of range 1..={}",
            model.cfg.branches
        )));
    }
    if let Some(name) = model.params.find_non_finite() {
        return Err(Error::numerical(format!(
            "model parameter {name} contains non-finite values"
        )));
    }
    if let Some(name) = text_params.find_non_finite() {
        return Err(Error::numerical(format!(
            "text parameter {name} contains non-finite values"
        )));
    }
    let ids = vec![vocab.tokenize(caption)];
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let phi = textenc::embed_text(&mut tape, &mut binder, text_params, &ids)?;
    let eps = textenc::sample_condition_noise(1, text_cfg.c_dim, rng);
    let cond = textenc::condition(&mut tape, &mut binder, text_params, phi, &eps)?;
    let noises = sample_noise_batch(1, k, model.cfg.z_dim, rng);

    let mut out = Vec::with_capacity(k);
    for (branch, z) in noises.into_iter().enumerate() {
        let z = tape.leaf(z.into_dyn());
        let gen = generator_forward(&mut tape, &mut binder, model, cond.c, z, branch)?;
        let finest = *gen.images.last().unwrap();
        let value: &ArrayD<f64> = tape.value(finest);
        let img = value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        out.push(img);
    }
    Ok(out)
}
