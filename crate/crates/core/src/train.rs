//! Two-phase training. Phase 1 alternates discriminator and generator
//! updates of the conditional GAN together with the text conditioning
//! encoders. Phase 2 freezes the GAN, synthesizes K images per record once
//! (cached, per-record deterministic seeds), and trains backbone, branch
//! fusion, text CNN, and classifier head with RMSProp at a fixed rate.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Phase};
use crate::dataset::{make_pyramid, ImagePyramid, ImageRecord};
use crate::error::{Error, Result};
use crate::fusion::{self, Mode};
use crate::optim::RmsProp;
use crate::params::{Binder, Params};
use crate::rng::{mix, stream, RngState, Seeds};
use crate::stackgman::{self, GmanModel, StageConfig};
use crate::textenc::{self, TextConfig, Vocabulary};
use crate::vision::{self, VisionConfig};
use crate::{autodiff::NodeId, autodiff::Tape};

const STREAM_P1_INIT: u64 = 0x10;
const STREAM_P1_DATA: u64 = 0x11;
const STREAM_P1_NOISE: u64 = 0x12;
const STREAM_P2_INIT: u64 = 0x20;
const STREAM_P2_DATA: u64 = 0x21;
const STREAM_P2_SYNTH: u64 = 0x22;

/// Adversarial phase hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Phase1Config {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lambda_kl: f64,
    /// Iterations between mid-run checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            lr_d: 2e-4,
            lr_g: 2e-4,
            lambda_kl: 1.0,
            checkpoint_interval: 0,
            log_interval: 50,
        }
    }
}

/// Classifier phase hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Phase2Config {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mode: Mode,
    /// Synthetic images per record; must not exceed the GAN's branch count.
    pub k_synth: usize,
    pub freeze_backbone: bool,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            mode: Mode::RST,
            k_synth: 5,
            freeze_backbone: false,
        }
    }
}

/// Everything a run needs: model shapes, training knobs, and seeds.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub stage: StageConfig,
    pub text: TextConfig,
    pub vision: VisionConfig,
    /// Branch-transform output width `h`.
    pub fusion_h: usize,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        self.text.validate()?;
        self.vision.validate()?;
        if self.fusion_h == 0 {
            return Err(Error::config("fusion_h must be positive"));
        }
        if self.vision.input != self.stage.finest_scale() {
            return Err(Error::config(format!(
                "backbone input {} must equal the finest stage scale {}",
                self.vision.input,
                self.stage.finest_scale()
            )));
        }
        if self.phase1.batch_size == 0 || self.phase1.log_interval == 0 {
            return Err(Error::config("phase1 batch_size and log_interval must be positive"));
        }
        if self.phase2.batch_size == 0 || self.phase2.epochs == 0 {
            return Err(Error::config("phase2 batch_size and epochs must be positive"));
        }
        if self.phase2.k_synth == 0 || self.phase2.k_synth > self.stage.branches {
            return Err(Error::config(format!(
                "k_synth {} must be in 1..={}",
                self.phase2.k_synth, self.stage.branches
            )));
        }
        if [self.phase1.lr_d, self.phase1.lr_g, self.phase2.lr]
            .iter()
            .any(|&lr| !(lr > 0.0))
        {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.phase1.lambda_kl < 0.0 {
            return Err(Error::config("lambda_kl must be non-negative"));
        }
        Ok(())
    }

    /// Stable hex digest of the serialized config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], len: usize) -> String {
    let mut s = String::with_capacity(len);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
        if s.len() >= len {
            break;
        }
    }
    s.truncate(len);
    s
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn now_secs() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Builds the run vocabulary over every caption of the training records.
pub fn build_vocab(records: &[ImageRecord], max_len: usize) -> Vocabulary {
    Vocabulary::build(
        records.iter().flat_map(|r| r.captions.iter().map(|c| c.as_str())),
        max_len,
    )
}

/// One line of the phase-1 training log (every `log_interval` iterations).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    pub stage: Vec<usize>,
    pub loss_d: Vec<f64>,
    pub loss_g: Vec<f64>,
    pub kl: f64,
    pub ts: f64,
}

/// Per-iteration statistics kept in memory for analysis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterStats {
    pub iter: u64,
    /// Maximized discriminator objective per stage.
    pub loss_d: Vec<f64>,
    /// Generator score loss per stage (before the KL term).
    pub loss_g: Vec<f64>,
    pub loss_g_total: f64,
    pub kl: f64,
    /// Mean unconditional discriminator score of finest-stage fakes,
    /// measured after the discriminator update.
    pub fake_score: f64,
}

#[derive(Default)]
pub struct Phase1Options {
    pub log_path: Option<PathBuf>,
    /// Where periodic and final checkpoints go when set.
    pub checkpoint_path: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

pub struct Phase1Output {
    pub checkpoint: Checkpoint,
    pub trace: Vec<IterStats>,
    pub log_lines: Vec<LogLine>,
}

fn stack_stage_batch(
    pyramids: &[ImagePyramid],
    batch: &[usize],
    stage: usize,
) -> Array4<f64> {
    let s = pyramids[batch[0]].levels[stage].dim().1;
    let mut out = Array4::<f64>::zeros((batch.len(), 3, s, s));
    for (bi, &ri) in batch.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&pyramids[ri].levels[stage]);
    }
    out
}

fn capture_rngs(data: &rand_chacha::ChaCha8Rng, noise: &rand_chacha::ChaCha8Rng) -> Vec<(String, RngState)> {
    vec![
        ("data".to_string(), RngState::capture(data)),
        ("noise".to_string(), RngState::capture(noise)),
    ]
}

/// Trains the GAN and conditioning encoders; alternates one discriminator
/// step and one generator step per batch, all stages updated jointly.
pub fn train_phase1(
    records: &[ImageRecord],
    cfg: &RunConfig,
    num_classes: usize,
    opts: Phase1Options,
) -> Result<Phase1Output> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let finest = cfg.stage.finest_scale();
    for r in records {
        let (_, h, w) = r.image.dim();
        if h != finest || w != finest {
            return Err(Error::shape(format!(
                "record {} is {h}x{w}, expected {finest}x{finest}",
                r.id
            )));
        }
        if r.captions.is_empty() {
            return Err(Error::data(format!("record {} has no captions", r.id)));
        }
    }

    let pyramids: Vec<ImagePyramid> = records
        .iter()
        .map(|r| make_pyramid(&r.image, &cfg.stage.scales))
        .collect::<Result<_>>()?;

    let (vocab, mut model, mut opt_d, mut opt_g, mut rng_data, mut rng_noise, start_iter) =
        match opts.resume {
            Some(ckpt) => {
                if ckpt.phase != Phase::Phase1 {
                    return Err(Error::Checkpoint("resume needs a phase-1 checkpoint".into()));
                }
                // the iteration target may grow on resume; everything else
                // must match the interrupted run exactly
                let mut frozen = ckpt.config.clone();
                frozen.phase1.iterations = cfg.phase1.iterations;
                if frozen != *cfg {
                    return Err(Error::Checkpoint(
                        "resume config differs from checkpoint config".into(),
                    ));
                }
                let mut opt_d = RmsProp::new(cfg.phase1.lr_d);
                let mut opt_g = RmsProp::new(cfg.phase1.lr_g);
                let mut acc_d = IndexMap::new();
                let mut acc_g = IndexMap::new();
                for (name, arr) in ckpt.opt_state.iter() {
                    if name.starts_with("D.") {
                        acc_d.insert(name.clone(), arr.clone());
                    } else {
                        acc_g.insert(name.clone(), arr.clone());
                    }
                }
                opt_d.restore(acc_d);
                opt_g.restore(acc_g);
                let rng_data = ckpt
                    .rng_state("data")
                    .ok_or_else(|| Error::Checkpoint("missing data rng state".into()))?
                    .restore();
                let rng_noise = ckpt
                    .rng_state("noise")
                    .ok_or_else(|| Error::Checkpoint("missing noise rng state".into()))?
                    .restore();
                let model = GmanModel {
                    cfg: cfg.stage.clone(),
                    c_dim: cfg.text.c_dim,
                    params: ckpt.params,
                };
                (ckpt.vocab, model, opt_d, opt_g, rng_data, rng_noise, ckpt.iteration)
            }
            None => {
                let vocab = build_vocab(records, cfg.text.max_len);
                let mut rng_init = stream(cfg.seeds.init, STREAM_P1_INIT);
                let mut model = stackgman::init_gman(&cfg.stage, cfg.text.c_dim, &mut rng_init)?;
                let text = textenc::init_text_encoder(&cfg.text, vocab.size(), &mut rng_init);
                model.params.absorb(text);
                (
                    vocab,
                    model,
                    RmsProp::new(cfg.phase1.lr_d),
                    RmsProp::new(cfg.phase1.lr_g),
                    stream(cfg.seeds.data, STREAM_P1_DATA),
                    stream(cfg.seeds.noise, STREAM_P1_NOISE),
                    0u64,
                )
            }
        };

    let m = cfg.stage.stages;
    let k = cfg.stage.branches;
    let bs = cfg.phase1.batch_size;
    let mut trace = Vec::new();
    let mut log_lines: Vec<LogLine> = Vec::new();
    let mut log_file = match &opts.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            Some(fs::File::create(p)?)
        }
        None => None,
    };

    let make_ckpt = |model: &GmanModel,
                     opt_d: &RmsProp,
                     opt_g: &RmsProp,
                     rng_data: &rand_chacha::ChaCha8Rng,
                     rng_noise: &rand_chacha::ChaCha8Rng,
                     iter: u64,
                     vocab: &Vocabulary| {
        let mut opt_state = IndexMap::new();
        for (n, a) in opt_d.state() {
            opt_state.insert(n.clone(), a.clone());
        }
        for (n, a) in opt_g.state() {
            opt_state.insert(n.clone(), a.clone());
        }
        opt_state.sort_keys();
        Checkpoint {
            phase: Phase::Phase1,
            config: cfg.clone(),
            num_classes,
            vocab: vocab.clone(),
            params: model.params.clone(),
            opt_state,
            iteration: iter,
            rng_states: capture_rngs(rng_data, rng_noise),
        }
    };

    for iter in start_iter..cfg.phase1.iterations as u64 {
        let batch: Vec<usize> = (0..bs).map(|_| rng_data.random_range(0..records.len())).collect();
        let ids: Vec<Vec<u32>> = batch
            .iter()
            .map(|&ri| {
                let caption = rng_data.random_range(0..records[ri].captions.len());
                vocab.tokenize(&records[ri].captions[caption])
            })
            .collect();

        let mut tape = Tape::new();
        let mut binder_gen = Binder::new();
        let phi = textenc::embed_text(&mut tape, &mut binder_gen, &model.params, &ids)?;
        let eps = textenc::sample_condition_noise(bs, cfg.text.c_dim, &mut rng_noise);
        let cond = textenc::condition(&mut tape, &mut binder_gen, &model.params, phi, &eps)?;
        let zs = stackgman::sample_noise_batch(bs, k, cfg.stage.z_dim, &mut rng_noise);

        // branch-major generator forward; images[k][stage]
        let mut images: Vec<Vec<NodeId>> = Vec::with_capacity(k);
        for (ki, z) in zs.iter().enumerate() {
            let z = tape.leaf(z.clone().into_dyn());
            let gen =
                stackgman::generator_forward(&mut tape, &mut binder_gen, &model, cond.c, z, ki)?;
            images.push(gen.images);
        }

        // discriminator update on detached fakes and conditioning
        let c_det = tape.detach(cond.c);
        let mut binder_d = Binder::new();
        let mut loss_d = Vec::with_capacity(m);
        let mut d_total: Option<NodeId> = None;
        let mut det_fu: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        let mut det_fc: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        for stage in 0..m {
            let real = tape.leaf(stack_stage_batch(&pyramids, &batch, stage).into_dyn());
            let (ru, rc) = stackgman::discriminator_forward(
                &mut tape,
                &mut binder_d,
                &model,
                real,
                c_det,
                stage,
            )?;
            let mut fu = Vec::with_capacity(k);
            let mut fc = Vec::with_capacity(k);
            for branch_images in images.iter() {
                let fake = tape.detach(branch_images[stage]);
                let (u, c) = stackgman::discriminator_forward(
                    &mut tape,
                    &mut binder_d,
                    &model,
                    fake,
                    c_det,
                    stage,
                )?;
                fu.push(u);
                fc.push(c);
            }
            let obj = stackgman::disc_objective_scores(&mut tape, ru, rc, &fu, &fc)?;
            loss_d.push(tape.scalar(obj));
            det_fu.push(fu);
            det_fc.push(fc);
            let neg = tape.neg(obj);
            d_total = Some(match d_total {
                Some(t) => tape.add(t, neg),
                None => neg,
            });
        }

        // pre-update baseline: with zero-initialized output heads every
        // score is exactly 0.5, so these match the closed-form values
        if iter == 0 {
            let baseline = stackgman::gen_objective_scores(
                &mut tape,
                &det_fu,
                &det_fc,
                Some(cond.kl),
                cfg.phase1.lambda_kl,
            )?;
            let fake_score = {
                let finest = m - 1;
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += tape.value(det_fu[finest][ki]).iter().sum::<f64>() / bs as f64;
                }
                acc / k as f64
            };
            let mut loss_g0 = Vec::with_capacity(m);
            for stage in 0..m {
                let mut acc = 0.0;
                for ki in 0..k {
                    for scores in [&det_fu[stage][ki], &det_fc[stage][ki]] {
                        acc += tape
                            .value(**scores)
                            .iter()
                            .map(|&p| {
                                -(p.clamp(stackgman::SCORE_CLAMP, 1.0 - stackgman::SCORE_CLAMP))
                                    .ln()
                            })
                            .sum::<f64>()
                            / bs as f64;
                    }
                }
                loss_g0.push(acc);
            }
            trace.push(IterStats {
                iter: 0,
                loss_d: loss_d.clone(),
                loss_g: loss_g0,
                loss_g_total: tape.scalar(baseline),
                kl: tape.scalar(cond.kl),
                fake_score,
            });
        }

        let d_loss_node = d_total.unwrap();
        let mut grads = tape.backward(d_loss_node);
        let gd = binder_d.collect_grads(&mut grads);
        opt_d.step(&mut model.params, &gd);

        // generator update against the refreshed discriminator
        let mut binder_d2 = Binder::new();
        let mut fus: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        let mut fcs: Vec<Vec<NodeId>> = Vec::with_capacity(m);
        for stage in 0..m {
            let mut fu = Vec::with_capacity(k);
            let mut fc = Vec::with_capacity(k);
            for branch_images in images.iter() {
                let (u, c) = stackgman::discriminator_forward(
                    &mut tape,
                    &mut binder_d2,
                    &model,
                    branch_images[stage],
                    cond.c,
                    stage,
                )?;
                fu.push(u);
                fc.push(c);
            }
            fus.push(fu);
            fcs.push(fc);
        }
        let g_loss = stackgman::gen_objective_scores(
            &mut tape,
            &fus,
            &fcs,
            Some(cond.kl),
            cfg.phase1.lambda_kl,
        )?;
        let kl_value = tape.scalar(cond.kl);
        let g_loss_value = tape.scalar(g_loss);
        let mut grads_g = tape.backward(g_loss);
        let gg = binder_gen.collect_grads(&mut grads_g);
        opt_g.step(&mut model.params, &gg);

        // per-stage generator score losses and the finest-stage fake score
        let mut loss_g = Vec::with_capacity(m);
        for stage in 0..m {
            let mut acc = 0.0;
            for ki in 0..k {
                let lu: f64 = tape
                    .value(fus[stage][ki])
                    .iter()
                    .map(|&p| -(p.clamp(stackgman::SCORE_CLAMP, 1.0 - stackgman::SCORE_CLAMP)).ln())
                    .sum::<f64>()
                    / bs as f64;
                let lc: f64 = tape
                    .value(fcs[stage][ki])
                    .iter()
                    .map(|&p| -(p.clamp(stackgman::SCORE_CLAMP, 1.0 - stackgman::SCORE_CLAMP)).ln())
                    .sum::<f64>()
                    / bs as f64;
                acc += lu + lc;
            }
            loss_g.push(acc);
        }
        let fake_score = {
            let finest = m - 1;
            let mut acc = 0.0;
            for ki in 0..k {
                acc += tape.value(fus[finest][ki]).iter().sum::<f64>() / bs as f64;
            }
            acc / k as f64
        };

        let iter1 = iter + 1;
        let stats = IterStats {
            iter: iter1,
            loss_d,
            loss_g,
            loss_g_total: g_loss_value,
            kl: kl_value,
            fake_score,
        };

        let finite = stats.loss_d.iter().all(|v| v.is_finite())
            && stats.loss_g_total.is_finite()
            && stats.kl.is_finite();
        if !finite {
            let diag_path = opts
                .log_path
                .as_deref()
                .map(|p| p.with_extension("diagnostic.json"))
                .unwrap_or_else(|| PathBuf::from("vital-diagnostic.json"));
            let dump = serde_json::json!({
                "iter": iter1,
                "batch": batch,
                "loss_d": stats.loss_d,
                "loss_g": stats.loss_g,
                "kl": stats.kl,
            });
            fs::write(&diag_path, serde_json::to_string_pretty(&dump)?)?;
            return Err(Error::Numerical {
                reason: format!("non-finite loss at iteration {iter1}"),
                diagnostic: Some(diag_path),
            });
        }

        let log_due = iter1 % cfg.phase1.log_interval as u64 == 0
            || iter1 == cfg.phase1.iterations as u64;
        if log_due {
            let line = LogLine {
                iter: iter1,
                stage: (0..m).collect(),
                loss_d: stats.loss_d.clone(),
                loss_g: stats.loss_g.clone(),
                kl: stats.kl,
                ts: now_secs(),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
            log_lines.push(line);
        }
        trace.push(stats);

        if cfg.phase1.checkpoint_interval > 0
            && iter1 % cfg.phase1.checkpoint_interval as u64 == 0
            && (iter1 as usize) < cfg.phase1.iterations
        {
            if let Some(path) = &opts.checkpoint_path {
                make_ckpt(&model, &opt_d, &opt_g, &rng_data, &rng_noise, iter1, &vocab)
                    .save(path)?;
            }
        }
    }

    let checkpoint = make_ckpt(
        &model,
        &opt_d,
        &opt_g,
        &rng_data,
        &rng_noise,
        cfg.phase1.iterations as u64,
        &vocab,
    );
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(Phase1Output {
        checkpoint,
        trace,
        log_lines,
    })
}

// ---------------------------------------------------------------------------
// Phase 2
// ---------------------------------------------------------------------------

/// Per-epoch accuracy trace entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_loss: f64,
}

pub struct Phase2Output {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochStats>,
}

/// Deterministic per-record synthesis seed.
fn record_synth_seed(noise_seed: u64, record_id: &str) -> u64 {
    mix(noise_seed, fnv1a(record_id), 0x5EED)
}

/// Synthesizes `k` images for one record (first caption), deterministic in
/// `(noise_seed, record id)`.
pub fn synthesize_for_record(
    record: &ImageRecord,
    k: usize,
    model: &GmanModel,
    text_params: &Params,
    text_cfg: &TextConfig,
    vocab: &Vocabulary,
    noise_seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let seed = record_synth_seed(noise_seed, &record.id);
    let mut rng = stream(seed, STREAM_P2_SYNTH);
    stackgman::synthesize(&record.captions[0], k, model, text_params, text_cfg, vocab, &mut rng)
}

/// On-disk cache of synthesized images, keyed by a content hash of the GAN
/// checkpoint. A miss regenerates deterministically.
pub struct SynthCache {
    dir: Option<PathBuf>,
}

impl SynthCache {
    pub fn new(dir: Option<&Path>, gan_hash: &str) -> Result<Self> {
        let dir = match dir {
            Some(d) => {
                let sub = d.join(format!("vital-synth-{gan_hash}"));
                fs::create_dir_all(&sub)?;
                Some(sub)
            }
            None => None,
        };
        Ok(Self { dir })
    }

    fn path_for(&self, id: &str, k: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.k{k}.bin")))
    }

    fn read(&self, id: &str, k: usize, side: usize) -> Option<Vec<Array3<f64>>> {
        let path = self.path_for(id, k)?;
        let bytes = fs::read(path).ok()?;
        let per = 3 * side * side;
        if bytes.len() != k * per * 8 {
            return None;
        }
        let mut out = Vec::with_capacity(k);
        for ki in 0..k {
            let mut data = Vec::with_capacity(per);
            for i in 0..per {
                let s = (ki * per + i) * 8;
                let mut le = [0u8; 8];
                le.copy_from_slice(&bytes[s..s + 8]);
                data.push(f64::from_le_bytes(le));
            }
            out.push(Array3::from_shape_vec((3, side, side), data).ok()?);
        }
        Some(out)
    }

    fn write(&self, id: &str, k: usize, images: &[Array3<f64>]) -> Result<()> {
        let Some(path) = self.path_for(id, k) else {
            return Ok(());
        };
        let mut bytes = Vec::new();
        for img in images {
            for &v in img.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// K synthetic images for every record, from cache or regenerated.
pub fn synth_images_for(
    records: &[ImageRecord],
    k: usize,
    gan: &Checkpoint,
    cache: &SynthCache,
) -> Result<Vec<Vec<Array3<f64>>>> {
    let cfg = &gan.config;
    let model = GmanModel {
        cfg: cfg.stage.clone(),
        c_dim: cfg.text.c_dim,
        params: gan.params.clone(),
    };
    let side = cfg.stage.finest_scale();
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            if let Some(hit) = cache.read(&r.id, k, side) {
                return Ok(hit);
            }
            let imgs = synthesize_for_record(
                r,
                k,
                &model,
                &gan.params,
                &cfg.text,
                &gan.vocab,
                cfg.seeds.noise,
            )?;
            cache.write(&r.id, k, &imgs)?;
            Ok(imgs)
        })
        .collect()
}

fn stack_images(images: &[&Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

/// Forward features and logits for one batch; used by both training and
/// evaluation passes.
#[allow(clippy::too_many_arguments)]
fn classifier_logits(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    records: &[&ImageRecord],
    aux: &[&Vec<Array3<f64>>],
    caption_pick: Option<&[usize]>,
) -> Result<NodeId> {
    let mode = cfg.phase2.mode;
    let k = aux[0].len();

    // v_s: backbone over each branch's image batch, branch transform, max
    let mut branches = Vec::with_capacity(k);
    for ki in 0..k {
        let imgs: Vec<&Array3<f64>> = aux.iter().map(|a| &a[ki]).collect();
        let x = tape.leaf(stack_images(&imgs).into_dyn());
        let pooled = vision::backbone_forward(tape, binder, params, &cfg.vision, x)?.pooled;
        branches.push(fusion::branch_transform(tape, binder, params, pooled, ki)?);
    }
    let v_s = fusion::fuse_max(tape, &branches)?;

    let v_x = if mode.uses_real() {
        let imgs: Vec<&Array3<f64>> = records.iter().map(|r| &r.image).collect();
        let x = tape.leaf(stack_images(&imgs).into_dyn());
        Some(vision::backbone_forward(tape, binder, params, &cfg.vision, x)?.pooled)
    } else {
        None
    };

    let v_t = if mode.uses_text() {
        let ids: Vec<Vec<u32>> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let pick = caption_pick.map_or(0, |p| p[i]) % r.captions.len();
                vocab.tokenize(&r.captions[pick])
            })
            .collect();
        Some(textenc::text_cnn_forward(tape, binder, params, &ids)?.v_t)
    } else {
        None
    };

    let combined = fusion::combine(tape, mode, v_x, v_s, v_t)?;
    fusion::head_logits(tape, binder, params, mode, combined)
}

/// Accuracy of the classifier over `records` with fixed parameters.
fn evaluate_split(
    params: &Params,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    records: &[ImageRecord],
    aux: &[Vec<Array3<f64>>],
) -> Result<f64> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for chunk in (0..records.len()).collect::<Vec<_>>().chunks(64) {
        let recs: Vec<&ImageRecord> = chunk.iter().map(|&i| &records[i]).collect();
        let auxs: Vec<&Vec<Array3<f64>>> = chunk.iter().map(|&i| &aux[i]).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let logits = classifier_logits(&mut tape, &mut binder, params, cfg, vocab, &recs, &auxs, None)?;
        let logits = tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        for (row, &ri) in fusion::predict(&logits).iter().zip(chunk.iter()) {
            if *row == records[ri].label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Shared classifier training core: trains backbone (unless frozen), branch
/// transforms, text CNN (RST only), and the mode head over the given
/// auxiliary image sets (synthetic branches or retrieved neighbors).
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_classifier(
    train: &[ImageRecord],
    train_aux: &[Vec<Array3<f64>>],
    test: &[ImageRecord],
    test_aux: &[Vec<Array3<f64>>],
    cfg: &RunConfig,
    vocab: &Vocabulary,
    num_classes: usize,
) -> Result<(Params, IndexMap<String, ArrayD<f64>>, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let k = train_aux[0].len();
    let d = cfg.vision.feature_dim();

    let mut rng_init = stream(cfg.seeds.init, STREAM_P2_INIT);
    let mut params = vision::init_backbone(&cfg.vision, &mut rng_init)?;
    params.absorb(fusion::init_fusion(d, cfg.fusion_h, k, &mut rng_init));
    params.absorb(textenc::init_text_cnn(&cfg.text, vocab.size(), num_classes, &mut rng_init));
    {
        let mode = cfg.phase2.mode;
        let dim = mode.combined_dim(d, cfg.fusion_h, cfg.text.t_dim);
        let mut head = Params::new();
        head.insert(
            format!("head.{mode}.w"),
            crate::params::he_normal(&[dim, num_classes], dim, &mut rng_init),
        );
        head.insert(format!("head.{mode}.b"), crate::params::zeros(&[num_classes]));
        params.absorb(head);
    }

    for r in train.iter().chain(test.iter()) {
        if r.label >= num_classes {
            return Err(Error::data(format!(
                "label {} of record {} out of range 0..{num_classes}",
                r.label, r.id
            )));
        }
    }

    let mut rng_data = stream(cfg.seeds.data, STREAM_P2_DATA);
    let mut opt = RmsProp::new(cfg.phase2.lr);
    let mut trace = Vec::new();

    for epoch in 1..=cfg.phase2.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_data);
        let mut loss_acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.phase2.batch_size) {
            let recs: Vec<&ImageRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let auxs: Vec<&Vec<Array3<f64>>> = chunk.iter().map(|&i| &train_aux[i]).collect();
            let picks: Vec<usize> = recs
                .iter()
                .map(|r| rng_data.random_range(0..r.captions.len()))
                .collect();
            let labels: Vec<usize> = recs.iter().map(|r| r.label).collect();

            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let logits = classifier_logits(
                &mut tape,
                &mut binder,
                &params,
                cfg,
                vocab,
                &recs,
                &auxs,
                Some(&picks),
            )?;
            let loss = fusion::xent_loss(&mut tape, logits, &labels)?;
            let loss_v = tape.scalar(loss);
            if !loss_v.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite classifier loss in epoch {epoch}"
                )));
            }
            loss_acc += loss_v;
            batches += 1;
            let mut grads = tape.backward(loss);
            let mut gg = binder.collect_grads(&mut grads);
            if cfg.phase2.freeze_backbone {
                gg.retain(|name, _| !name.starts_with("backbone."));
            }
            opt.step(&mut params, &gg);
        }
        let train_acc = evaluate_split(&params, cfg, vocab, train, train_aux)?;
        let test_acc = evaluate_split(&params, cfg, vocab, test, test_aux)?;
        trace.push(EpochStats {
            epoch,
            train_acc,
            test_acc,
            mean_loss: loss_acc / batches.max(1) as f64,
        });
    }

    let mut opt_state = opt.state().clone();
    opt_state.sort_keys();
    Ok((params, opt_state, trace))
}

/// Trains the classifier phase on top of a frozen phase-1 checkpoint.
///
/// Synthetic images are generated once per record under per-record seeds
/// and cached (in `cache_dir` when given); the GAN parameters are embedded
/// unchanged in the returned checkpoint.
pub fn train_phase2(
    train: &[ImageRecord],
    test: &[ImageRecord],
    gan: &Checkpoint,
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<Phase2Output> {
    cfg.validate()?;
    if gan.phase != Phase::Phase1 {
        return Err(Error::Checkpoint("phase 2 needs a phase-1 checkpoint".into()));
    }
    if gan.config.stage != cfg.stage || gan.config.text != cfg.text {
        return Err(Error::config(
            "stage/text configuration differs from the GAN checkpoint",
        ));
    }
    let num_classes = gan.num_classes;
    let k = cfg.phase2.k_synth;

    let gan_hash = {
        let mut hasher = Sha256::new();
        hasher.update(gan.to_bytes()?);
        hex_prefix(&hasher.finalize(), 16)
    };
    let cache = SynthCache::new(cache_dir, &gan_hash)?;
    let train_aux = synth_images_for(train, k, gan, &cache)?;
    let test_aux = synth_images_for(test, k, gan, &cache)?;

    let (phase2_params, opt_state, trace) = train_classifier(
        train,
        &train_aux,
        test,
        &test_aux,
        cfg,
        &gan.vocab,
        num_classes,
    )?;

    // phase-1 parameters first and bit-identical, then the new ones
    let mut params = gan.params.clone();
    params.absorb(phase2_params);

    let checkpoint = Checkpoint {
        phase: Phase::Phase2,
        config: cfg.clone(),
        num_classes,
        vocab: gan.vocab.clone(),
        params,
        opt_state,
        iteration: cfg.phase2.epochs as u64,
        rng_states: gan.rng_states.clone(),
    };
    Ok(Phase2Output { checkpoint, trace })
}

/// Splits a phase-2 checkpoint back into its frozen GAN model.
pub fn gan_from_checkpoint(ckpt: &Checkpoint) -> GmanModel {
    GmanModel {
        cfg: ckpt.config.stage.clone(),
        c_dim: ckpt.config.text.c_dim,
        params: ckpt.params.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToySpec};

    fn tiny_config() -> RunConfig {
        RunConfig {
            stage: StageConfig {
                stages: 2,
                scales: vec![4, 8],
                branches: 2,
                z_dim: 4,
                g_ch: 6,
                d_ch: 4,
                tied_weights: true,
            },
            text: TextConfig {
                max_len: 8,
                embed_dim: 8,
                phi_dim: 6,
                c_dim: 4,
                cnn_embed_dim: 8,
                cnn_filters: 4,
                t_dim: 8,
            },
            vision: VisionConfig {
                input: 8,
                channels: [4, 6, 8],
            },
            fusion_h: 6,
            phase1: Phase1Config {
                batch_size: 4,
                iterations: 6,
                log_interval: 2,
                ..Phase1Config::default()
            },
            phase2: Phase2Config {
                batch_size: 8,
                epochs: 2,
                k_synth: 2,
                ..Phase2Config::default()
            },
            seeds: Seeds::default(),
        }
    }

    fn tiny_records() -> Vec<ImageRecord> {
        let spec = ToySpec {
            canvas: 8,
            samples_per_class: 6,
            ..ToySpec::default()
        };
        generate_toy_dataset(&spec).unwrap().records
    }

    #[test]
    fn zero_iterations_checkpoint_equals_initialization() {
        let mut cfg = tiny_config();
        cfg.phase1.iterations = 0;
        let records = tiny_records();
        let out = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        assert!(out.trace.is_empty());
        assert!(out.log_lines.is_empty());
        assert_eq!(out.checkpoint.iteration, 0);

        // replay the init sequence: parameters must match exactly
        let vocab = build_vocab(&records, cfg.text.max_len);
        let mut rng_init = stream(cfg.seeds.init, STREAM_P1_INIT);
        let mut expect = stackgman::init_gman(&cfg.stage, cfg.text.c_dim, &mut rng_init).unwrap();
        expect
            .params
            .absorb(textenc::init_text_encoder(&cfg.text, vocab.size(), &mut rng_init));
        assert_eq!(out.checkpoint.params.len(), expect.params.len());
        for (name, arr) in expect.params.iter() {
            assert_eq!(out.checkpoint.params.expect(name), arr, "param {name}");
        }
    }

    #[test]
    fn fixed_seeds_give_identical_loss_curves() {
        let cfg = tiny_config();
        let records = tiny_records();
        let a = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        let b = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(x.loss_d, y.loss_d);
            assert_eq!(x.loss_g_total, y.loss_g_total);
            assert_eq!(x.kl, y.kl);
            assert_eq!(x.fake_score, y.fake_score);
        }
    }

    #[test]
    fn iteration_zero_losses_match_closed_form() {
        let cfg = tiny_config();
        let records = tiny_records();
        let out = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        let base = &out.trace[0];
        assert_eq!(base.iter, 0);
        let k = cfg.stage.branches as f64;
        let m = cfg.stage.stages as f64;
        for (stage, &ld) in base.loss_d.iter().enumerate() {
            let expect = -4.0 * k * 2.0_f64.ln();
            assert!((ld - expect).abs() < 1e-9, "stage {stage}: {ld} vs {expect}");
        }
        // zero-initialized conditioning gives kl = 0, so the generator
        // baseline is exactly 2 m K ln 2
        assert!(base.kl.abs() < 1e-12);
        let expect_g = 2.0 * m * k * 2.0_f64.ln();
        assert!((base.loss_g_total - expect_g).abs() < 1e-9);
        assert!((base.fake_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_line_count_contract() {
        let records = tiny_records();
        for (iterations, expect) in [(6usize, 3usize), (5, 3), (4, 2), (1, 1), (0, 0)] {
            let mut cfg = tiny_config();
            cfg.phase1.iterations = iterations;
            let out = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
            assert_eq!(
                out.log_lines.len(),
                expect,
                "iterations {iterations} with interval 2"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let mut cfg = tiny_config();
        cfg.phase1.iterations = 2;
        let records = tiny_records();
        let out = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        out.checkpoint.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.iteration, 2);
    }

    #[test]
    fn corrupt_magic_is_a_version_error() {
        let mut cfg = tiny_config();
        cfg.phase1.iterations = 1;
        let records = tiny_records();
        let out = train_phase1(&records, &cfg, 4, Phase1Options::default()).unwrap();
        let mut bytes = out.checkpoint.to_bytes().unwrap();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointVersion { expected, found }) => {
                assert_eq!(expected, crate::checkpoint::FORMAT_ID);
                assert!(found.starts_with('X'));
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let records = tiny_records();
        let mut full_cfg = tiny_config();
        full_cfg.phase1.iterations = 4;
        let full = train_phase1(&records, &full_cfg, 4, Phase1Options::default()).unwrap();

        let mut half_cfg = tiny_config();
        half_cfg.phase1.iterations = 2;
        let half = train_phase1(&records, &half_cfg, 4, Phase1Options::default()).unwrap();
        let resumed = train_phase1(
            &records,
            &full_cfg,
            4,
            Phase1Options {
                resume: Some(half.checkpoint),
                ..Phase1Options::default()
            },
        )
        .unwrap();

        for (name, arr) in full.checkpoint.params.iter() {
            assert_eq!(
                resumed.checkpoint.params.expect(name),
                arr,
                "resumed parameter {name} diverged"
            );
        }
        assert_eq!(resumed.checkpoint.iteration, 4);
    }

    #[test]
    fn nan_parameters_abort_with_diagnostic() {
        let records = tiny_records();
        let mut cfg = tiny_config();
        cfg.phase1.iterations = 1;
        let init = train_phase1(
            &records,
            &{
                let mut c = cfg.clone();
                c.phase1.iterations = 0;
                c
            },
            4,
            Phase1Options::default(),
        )
        .unwrap();
        let mut poisoned = init.checkpoint;
        poisoned.params.get_mut("D.0.conv0.w").unwrap()[[0, 0, 0, 0]] = f64::NAN;
        poisoned.config.phase1.iterations = 1;
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("train.log.jsonl");
        let err = train_phase1(
            &records,
            &cfg,
            4,
            Phase1Options {
                log_path: Some(log),
                resume: Some(poisoned),
                ..Phase1Options::default()
            },
        )
        .unwrap_err();
        match err {
            Error::Numerical { diagnostic, .. } => {
                let path = diagnostic.expect("diagnostic dump path");
                assert!(path.exists());
                let dump: serde_json::Value =
                    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
                assert!(dump.get("iter").is_some());
                assert!(dump.get("batch").is_some());
            }
            other => panic!("expected numerical error, got {other}"),
        }
    }

    fn quick_phase1(records: &[ImageRecord], cfg: &RunConfig) -> Checkpoint {
        let mut c = cfg.clone();
        c.phase1.iterations = 2;
        train_phase1(records, &c, 4, Phase1Options::default())
            .unwrap()
            .checkpoint
    }

    #[test]
    fn phase2_never_touches_phase1_parameters() {
        let records = tiny_records();
        let cfg = tiny_config();
        let gan = quick_phase1(&records, &cfg);
        let (train, test) = crate::dataset::split(&records, 0.25, 3).unwrap();
        let out = train_phase2(&train, &test, &gan, &cfg, None).unwrap();
        for (name, arr) in gan.params.iter() {
            assert_eq!(
                out.checkpoint.params.expect(name),
                arr,
                "phase 2 modified frozen parameter {name}"
            );
        }
        assert_eq!(out.trace.len(), cfg.phase2.epochs);
    }

    #[test]
    fn phase2_is_deterministic() {
        let records = tiny_records();
        let cfg = tiny_config();
        let gan = quick_phase1(&records, &cfg);
        let (train, test) = crate::dataset::split(&records, 0.25, 3).unwrap();
        let a = train_phase2(&train, &test, &gan, &cfg, None).unwrap();
        let b = train_phase2(&train, &test, &gan, &cfg, None).unwrap();
        for (x, y) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(x.train_acc, y.train_acc);
            assert_eq!(x.test_acc, y.test_acc);
            assert_eq!(x.mean_loss, y.mean_loss);
        }
    }

    #[test]
    fn phase2_mode_s_never_touches_text_cnn_or_real_path() {
        let records = tiny_records();
        let mut cfg = tiny_config();
        cfg.phase2.mode = Mode::S;
        let gan = quick_phase1(&records, &cfg);
        let (train, test) = crate::dataset::split(&records, 0.25, 3).unwrap();
        let out = train_phase2(&train, &test, &gan, &cfg, None).unwrap();

        // replay phase-2 init: the text CNN parameters must be untouched
        let d = cfg.vision.feature_dim();
        let mut rng_init = stream(cfg.seeds.init, STREAM_P2_INIT);
        let _backbone = vision::init_backbone(&cfg.vision, &mut rng_init).unwrap();
        let _fusion = fusion::init_fusion(d, cfg.fusion_h, cfg.phase2.k_synth, &mut rng_init);
        let textcnn = textenc::init_text_cnn(&cfg.text, gan.vocab.size(), 4, &mut rng_init);
        for (name, arr) in textcnn.iter() {
            assert_eq!(
                out.checkpoint.params.expect(name),
                arr,
                "mode S trained text parameter {name}"
            );
        }
        // and the S head takes only the fused synthetic feature
        assert_eq!(
            out.checkpoint.params.expect("head.S.w").shape(),
            &[cfg.fusion_h, 4]
        );
    }

    #[test]
    fn phase2_synth_cache_roundtrip() {
        let records = tiny_records();
        let cfg = tiny_config();
        let gan = quick_phase1(&records, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let cache_dir = dir.path().join("cache");
        fs::create_dir_all(&cache_dir).unwrap();

        let hash = "testhash";
        let cache = SynthCache::new(Some(&cache_dir), hash).unwrap();
        let a = synth_images_for(&records[..4], 2, &gan, &cache).unwrap();
        // second call hits the disk cache, must be identical
        let cache2 = SynthCache::new(Some(&cache_dir), hash).unwrap();
        let b = synth_images_for(&records[..4], 2, &gan, &cache2).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            for (ix, iy) in x.iter().zip(y.iter()) {
                assert_eq!(ix, iy);
            }
        }
        // cache miss after wiping regenerates the same images
        fs::remove_dir_all(&cache_dir).unwrap();
        fs::create_dir_all(&cache_dir).unwrap();
        let cache3 = SynthCache::new(Some(&cache_dir), hash).unwrap();
        let c = synth_images_for(&records[..4], 2, &gan, &cache3).unwrap();
        for (x, y) in a.iter().zip(c.iter()) {
            for (ix, iy) in x.iter().zip(y.iter()) {
                assert_eq!(ix, iy);
            }
        }
    }
}
