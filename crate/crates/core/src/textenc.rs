//! Caption encoders: tokenization, the learned text embedding used for GAN
//! conditioning, the Gaussian conditioning augmentation producing `c`, and
//! the 3-kernel multichannel text CNN producing the text-level feature.
//!
//! The conditioning path (trained in the adversarial phase) and the text
//! CNN trunk (trained in the classifier phase) are completely separate
//! parameter sets so the phases stay independent.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{he_normal, normal, zeros, Binder, Params};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Kernel widths of the three parallel text convolutions.
pub const KERNEL_SIZES: [usize; 3] = [3, 4, 5];

/// Token ids dense in `[0, len)` with reserved pad and unknown slots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    pub max_len: usize,
    entries: Vec<VocabEntry>,
    #[serde(skip)]
    index: IndexMap<String, u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: u32,
    count: u64,
}

/// Lowercase word tokenization shared by the vocabulary and tag code.
pub fn word_tokens(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|t| t.to_string())
        .collect()
}

impl Vocabulary {
    /// Builds over training captions; tokens rank by descending count with
    /// alphabetic tie-break so ids are reproducible.
    pub fn build<'a>(captions: impl Iterator<Item = &'a str>, max_len: usize) -> Self {
        let mut counts: IndexMap<String, u64> = IndexMap::new();
        for caption in captions {
            for token in word_tokens(caption) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let entries: Vec<VocabEntry> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (token, count))| VocabEntry {
                token,
                id: i as u32 + 2,
                count,
            })
            .collect();
        let mut vocab = Self {
            max_len,
            entries,
            index: IndexMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .map(|e| (e.token.clone(), e.id))
            .collect();
    }

    /// Total id count including pad and unknown.
    pub fn size(&self) -> usize {
        self.entries.len() + 2
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Lowercase word split, truncated and padded to `max_len`;
    /// out-of-vocabulary words map to the unknown id.
    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = word_tokens(caption)
            .into_iter()
            .take(self.max_len)
            .map(|t| self.id_of(&t))
            .collect();
        ids.resize(self.max_len, PAD_ID);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut vocab: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        vocab.rebuild_index();
        Ok(vocab)
    }
}

/// Dimensions of the text-side models.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextConfig {
    pub max_len: usize,
    /// Token embedding width of the conditioning encoder.
    pub embed_dim: usize,
    /// Width of the text embedding `phi_t`.
    pub phi_dim: usize,
    /// Width of the conditioning vector `c`.
    pub c_dim: usize,
    /// Token embedding width of the text CNN.
    pub cnn_embed_dim: usize,
    /// Filters per kernel size in the text CNN.
    pub cnn_filters: usize,
    /// Width of the text-level feature `v_t`.
    pub t_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            max_len: 12,
            embed_dim: 32,
            phi_dim: 32,
            c_dim: 16,
            cnn_embed_dim: 32,
            cnn_filters: 16,
            t_dim: 64,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < *KERNEL_SIZES.iter().max().unwrap() {
            return Err(Error::config(format!(
                "max_len {} shorter than the widest kernel {}",
                self.max_len,
                KERNEL_SIZES.iter().max().unwrap()
            )));
        }
        if [self.embed_dim, self.phi_dim, self.c_dim, self.cnn_embed_dim, self.cnn_filters, self.t_dim]
            .iter()
            .any(|&d| d == 0)
        {
            return Err(Error::config("text dimensions must be positive"));
        }
        Ok(())
    }
}

/// Initializes the conditioning-side encoder (`txt.*`, `ca.*`). The
/// augmentation projections start at zero so `mu = 0`, `log_sigma = 0` and
/// the KL term is exactly zero before any update.
pub fn init_text_encoder(cfg: &TextConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    let mut embed = normal(&[vocab_size, cfg.embed_dim], 0.1, rng);
    embed.index_axis_mut(ndarray::Axis(0), PAD_ID as usize).fill(0.0);
    p.insert("txt.embed", embed);
    p.insert("txt.dense.w", he_normal(&[cfg.embed_dim, cfg.phi_dim], cfg.embed_dim, rng));
    p.insert("txt.dense.b", zeros(&[cfg.phi_dim]));
    p.insert("ca.mu.w", zeros(&[cfg.phi_dim, cfg.c_dim]));
    p.insert("ca.mu.b", zeros(&[cfg.c_dim]));
    p.insert("ca.logsig.w", zeros(&[cfg.phi_dim, cfg.c_dim]));
    p.insert("ca.logsig.b", zeros(&[cfg.c_dim]));
    p
}

/// Initializes the classifier-side text CNN (`textcnn.*`).
pub fn init_text_cnn(
    cfg: &TextConfig,
    vocab_size: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Params {
    let mut p = Params::new();
    let mut embed = normal(&[vocab_size, cfg.cnn_embed_dim], 0.1, rng);
    embed.index_axis_mut(ndarray::Axis(0), PAD_ID as usize).fill(0.0);
    p.insert("textcnn.embed", embed);
    for ks in KERNEL_SIZES {
        let fan_in = cfg.cnn_embed_dim * ks;
        p.insert(
            format!("textcnn.conv{ks}.w"),
            he_normal(&[cfg.cnn_filters, cfg.cnn_embed_dim, 1, ks], fan_in, rng),
        );
        p.insert(format!("textcnn.conv{ks}.b"), zeros(&[cfg.cnn_filters]));
    }
    let concat = cfg.cnn_filters * KERNEL_SIZES.len();
    p.insert("textcnn.fc.w", he_normal(&[concat, cfg.t_dim], concat, rng));
    p.insert("textcnn.fc.b", zeros(&[cfg.t_dim]));
    p.insert("textcnn.out.w", he_normal(&[cfg.t_dim, num_classes], cfg.t_dim, rng));
    p.insert("textcnn.out.b", zeros(&[num_classes]));
    p
}

fn flatten_ids(ids_batch: &[Vec<u32>]) -> (Vec<u32>, usize, usize) {
    let b = ids_batch.len();
    let l = ids_batch.first().map_or(0, |v| v.len());
    let flat: Vec<u32> = ids_batch.iter().flat_map(|v| v.iter().copied()).collect();
    (flat, b, l)
}

fn check_ids(flat: &[u32], vocab_size: usize) -> Result<()> {
    if let Some(&bad) = flat.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::data(format!(
            "token id {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// Text embedding `phi_t`: mean of non-pad token embeddings through one
/// dense layer with ReLU. All-pad input passes a zero vector through the
/// dense layer rather than erroring.
pub fn embed_text(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    ids_batch: &[Vec<u32>],
) -> Result<NodeId> {
    let (flat, b, l) = flatten_ids(ids_batch);
    check_ids(&flat, params.expect("txt.embed").shape()[0])?;
    let table = binder.get(tape, params, "txt.embed");
    let emb = tape.embedding(table, &flat, b, l);
    let mask: Vec<bool> = flat.iter().map(|&id| id != PAD_ID).collect();
    let mean = tape.masked_mean_rows(emb, &mask);
    let w = binder.get(tape, params, "txt.dense.w");
    let bias = binder.get(tape, params, "txt.dense.b");
    let dense = tape.dense(mean, w, bias);
    Ok(tape.relu(dense))
}

/// Conditioning augmentation output on the tape.
pub struct Conditioning {
    pub c: NodeId,
    pub mu: NodeId,
    pub log_sigma: NodeId,
    /// Scalar node: mean over the batch of `0.5 * sum(mu^2 + exp(2 ls) - 1 - 2 ls)`.
    pub kl: NodeId,
}

/// Standard-normal reparameterization noise for a batch.
pub fn sample_condition_noise(b: usize, c_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((b, c_dim), |_| rng.sample(rand_distr::StandardNormal))
}

/// Gaussian conditioning augmentation: `c = mu + exp(log_sigma) * eps` with
/// the closed-form KL penalty against the standard normal.
pub fn condition(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    phi: NodeId,
    eps: &Array2<f64>,
) -> Result<Conditioning> {
    if tape.value(phi).iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite text embedding"));
    }
    let b = tape.value(phi).shape()[0];
    let mw = binder.get(tape, params, "ca.mu.w");
    let mb = binder.get(tape, params, "ca.mu.b");
    let sw = binder.get(tape, params, "ca.logsig.w");
    let sb = binder.get(tape, params, "ca.logsig.b");
    let mu = tape.dense(phi, mw, mb);
    let log_sigma = tape.dense(phi, sw, sb);
    assert_eq!(eps.dim(), (b, tape.value(mu).shape()[1]), "noise shape");

    let eps_node = tape.leaf(eps.clone().into_dyn());
    let sigma = tape.exp(log_sigma);
    let scaled = tape.mul(sigma, eps_node);
    let c = tape.add(mu, scaled);

    // 0.5 * (mu^2 + exp(2 ls) - 1 - 2 ls), summed over dims, mean over batch
    let mu2 = tape.mul(mu, mu);
    let two_ls = tape.mul_scalar(log_sigma, 2.0);
    let e2ls = tape.exp(two_ls);
    let a = tape.add(mu2, e2ls);
    let b_term = tape.add_scalar(two_ls, 1.0);
    let inner = tape.sub(a, b_term);
    let total = tape.sum(inner);
    let kl = tape.mul_scalar(total, 0.5 / b as f64);
    Ok(Conditioning { c, mu, log_sigma, kl })
}

/// Text CNN forward products on the tape.
pub struct TextCnnOut {
    /// Text-level feature `[B, t_dim]` (second-last layer).
    pub v_t: NodeId,
    /// Class logits `[B, C]`.
    pub logits: NodeId,
    /// Post-ReLU convolution maps per kernel size, pre max-over-time.
    pub conv_maps: Vec<NodeId>,
}

/// Three parallel 1-D convolutions (kernels 3/4/5) over token embeddings,
/// ReLU, max-over-time per filter, concatenation, then a dense layer giving
/// `v_t` and a second dense layer giving class logits.
pub fn text_cnn_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &Params,
    ids_batch: &[Vec<u32>],
) -> Result<TextCnnOut> {
    let (flat, b, l) = flatten_ids(ids_batch);
    check_ids(&flat, params.expect("textcnn.embed").shape()[0])?;
    if l < *KERNEL_SIZES.iter().max().unwrap() {
        return Err(Error::config(format!(
            "sequence length {l} shorter than widest kernel"
        )));
    }
    let table = binder.get(tape, params, "textcnn.embed");
    let emb = tape.embedding(table, &flat, b, l); // [B, L, E]
    let bel = tape.permute(emb, &[0, 2, 1]); // [B, E, L]
    let e = tape.value(bel).shape()[1];
    let x = tape.reshape(bel, &[b, e, 1, l]); // [B, E, 1, L]

    let mut pooled = Vec::new();
    let mut conv_maps = Vec::new();
    for ks in KERNEL_SIZES {
        let w = binder.get(tape, params, &format!("textcnn.conv{ks}.w"));
        let bias = binder.get(tape, params, &format!("textcnn.conv{ks}.b"));
        let conv = tape.conv2d(x, w, 1, 0); // [B, F, 1, L-ks+1]
        let biased = tape.add_chan_bias(conv, bias);
        let act = tape.relu(biased);
        conv_maps.push(act);
        pooled.push(tape.max_pool_all(act)); // [B, F]
    }
    let cat = tape.concat(1, &pooled);
    let fw = binder.get(tape, params, "textcnn.fc.w");
    let fb = binder.get(tape, params, "textcnn.fc.b");
    let fc = tape.dense(cat, fw, fb);
    let v_t = tape.relu(fc);
    let ow = binder.get(tape, params, "textcnn.out.w");
    let ob = binder.get(tape, params, "textcnn.out.b");
    let logits = tape.dense(v_t, ow, ob);
    Ok(TextCnnOut { v_t, logits, conv_maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::rng::stream;
    use ndarray::{arr2, ArrayD};

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["a small red circle near the top left", "a large green square at the center"]
                .into_iter(),
            8,
        )
    }

    #[test]
    fn tokenize_pads_truncates_and_maps_oov() {
        let v = vocab();
        assert_eq!(v.tokenize(""), vec![PAD_ID; 8]);
        let ids = v.tokenize("red circle small");
        assert_eq!(ids.len(), 8);
        assert!(ids[..3].iter().all(|&i| i >= 2));
        assert!(ids[3..].iter().all(|&i| i == PAD_ID));
        let ids = v.tokenize("zebra circle");
        assert_eq!(ids[0], UNK_ID);
        assert!(ids[1] >= 2);
        let long = "a a a a a a a a a a a a";
        assert_eq!(v.tokenize(long).len(), 8);
    }

    #[test]
    fn vocab_roundtrip_and_determinism() {
        let v1 = vocab();
        let v2 = vocab();
        assert_eq!(v1.size(), v2.size());
        assert_eq!(v1.tokenize("red square"), v2.tokenize("red square"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v1.save(&path).unwrap();
        let v3 = Vocabulary::load(&path).unwrap();
        assert_eq!(v1.tokenize("green circle near"), v3.tokenize("green circle near"));
    }

    fn toy_cfg() -> TextConfig {
        TextConfig {
            max_len: 8,
            embed_dim: 6,
            phi_dim: 5,
            c_dim: 3,
            cnn_embed_dim: 6,
            cnn_filters: 4,
            t_dim: 7,
            ..TextConfig::default()
        }
    }

    #[test]
    fn phi_single_token_equals_dense_of_its_embedding() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(1, 0);
        let params = init_text_encoder(&cfg, v.size(), &mut rng);
        let token_id = v.tokenize("red")[0];

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let ids = vec![v.tokenize("red")];
        let phi = embed_text(&mut tape, &mut binder, &params, &ids).unwrap();

        // oracle: dense(row) with ReLU, computed directly from the arrays
        let table = params.expect("txt.embed");
        let row: Vec<f64> = (0..cfg.embed_dim).map(|j| table[[token_id as usize, j]]).collect();
        let w = params.expect("txt.dense.w");
        let b = params.expect("txt.dense.b");
        for j in 0..cfg.phi_dim {
            let mut acc = b[[j]];
            for (i, r) in row.iter().enumerate() {
                acc += r * w[[i, j]];
            }
            let expect = acc.max(0.0);
            let got = tape.value(phi)[[0, j]];
            assert!((got - expect).abs() < 1e-12, "dim {j}: {got} vs {expect}");
        }
    }

    #[test]
    fn phi_is_order_invariant() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(2, 0);
        let params = init_text_encoder(&cfg, v.size(), &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let a = embed_text(&mut tape, &mut binder, &params, &[v.tokenize("red circle small")]).unwrap();
        let b = embed_text(&mut tape, &mut binder, &params, &[v.tokenize("small red circle")]).unwrap();
        let diff: f64 = tape
            .value(a)
            .iter()
            .zip(tape.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn phi_distinct_for_disjoint_orthogonal_embeddings() {
        // hand-constructed embeddings: token "red" -> e0, token "green" -> e1
        let cfg = TextConfig { embed_dim: 2, phi_dim: 2, ..toy_cfg() };
        let v = vocab();
        let mut rng = stream(3, 0);
        let mut params = init_text_encoder(&cfg, v.size(), &mut rng);
        let red = v.id_of("red") as usize;
        let green = v.id_of("green") as usize;
        let table = params.get_mut("txt.embed").unwrap();
        table.fill(0.0);
        table[[red, 0]] = 1.0;
        table[[green, 1]] = 1.0;
        *params.get_mut("txt.dense.w").unwrap() = arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        params.get_mut("txt.dense.b").unwrap().fill(0.0);

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let pa = embed_text(&mut tape, &mut binder, &params, &[v.tokenize("red")]).unwrap();
        let pb = embed_text(&mut tape, &mut binder, &params, &[v.tokenize("green")]).unwrap();
        assert_ne!(tape.value(pa), tape.value(pb));
        assert_eq!(tape.value(pa)[[0, 0]], 1.0);
        assert_eq!(tape.value(pb)[[0, 1]], 1.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        // mu = 0, log_sigma = 0 -> kl = 0; mu = (1,0), ls = 0 -> kl = 0.5
        let cfg = TextConfig { c_dim: 2, ..toy_cfg() };
        let v = vocab();
        let mut rng = stream(4, 0);
        let mut params = init_text_encoder(&cfg, v.size(), &mut rng);

        let run = |params: &Params| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let ids = vec![v.tokenize("red circle")];
            let phi = embed_text(&mut tape, &mut binder, params, &ids).unwrap();
            let eps = Array2::zeros((1, 2));
            let cond = condition(&mut tape, &mut binder, params, phi, &eps).unwrap();
            (tape.scalar(cond.kl), tape.value(cond.c).clone(), tape.value(cond.mu).clone())
        };

        let (kl0, c0, mu0) = run(&params);
        assert!(kl0.abs() < 1e-12, "zero-init CA gives kl = 0, got {kl0}");
        assert_eq!(c0, mu0, "eps = 0 gives c = mu exactly");

        // force mu = (1, 0): zero weights, bias (1, 0)
        params.get_mut("ca.mu.b").unwrap()[[0]] = 1.0;
        let (kl, c, mu) = run(&params);
        assert!((kl - 0.5).abs() < 1e-12, "hand-computed kl 0.5, got {kl}");
        assert_eq!(c, mu);
    }

    #[test]
    fn kl_is_nonnegative_for_random_inputs() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(5, 0);
        for trial in 0..50 {
            let mut params = init_text_encoder(&cfg, v.size(), &mut rng);
            // randomize the CA projections away from zero
            *params.get_mut("ca.mu.w").unwrap() =
                normal(&[cfg.phi_dim, cfg.c_dim], 1.0, &mut rng);
            *params.get_mut("ca.logsig.w").unwrap() =
                normal(&[cfg.phi_dim, cfg.c_dim], 0.7, &mut rng);
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let phi = embed_text(&mut tape, &mut binder, &params, &[v.tokenize("red circle top")]).unwrap();
            let eps = sample_condition_noise(1, cfg.c_dim, &mut rng);
            let cond = condition(&mut tape, &mut binder, &params, phi, &eps).unwrap();
            let kl = tape.scalar(cond.kl);
            assert!(kl >= 0.0, "trial {trial}: kl = {kl}");
        }
    }

    #[test]
    fn text_cnn_output_dims_independent_of_max_len() {
        let v5 = Vocabulary::build(["red circle small top left"].into_iter(), 5);
        let v9 = Vocabulary::build(["red circle small top left"].into_iter(), 9);
        let cfg = toy_cfg();
        let mut rng = stream(6, 0);
        let params = init_text_cnn(&cfg, v9.size().max(v5.size()), 4, &mut rng);
        for (v, l) in [(v5, 5usize), (v9, 9usize)] {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out =
                text_cnn_forward(&mut tape, &mut binder, &params, &[v.tokenize("red circle")])
                    .unwrap();
            assert_eq!(tape.value(out.v_t).shape(), &[1, cfg.t_dim], "max_len {l}");
            assert_eq!(tape.value(out.logits).shape(), &[1, 4]);
        }
    }

    #[test]
    fn text_cnn_all_pad_input_is_bias_determined() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(7, 0);
        let mut params = init_text_cnn(&cfg, v.size(), 3, &mut rng);
        // give conv biases distinctive values
        for ks in KERNEL_SIZES {
            let b = params.get_mut(&format!("textcnn.conv{ks}.b")).unwrap();
            for (i, x) in b.iter_mut().enumerate() {
                *x = 0.05 * (i as f64 + 1.0) * if ks % 2 == 0 { -1.0 } else { 1.0 };
            }
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = text_cnn_forward(&mut tape, &mut binder, &params, &[v.tokenize("")]).unwrap();

        // oracle: with a zero pad embedding row, every conv window sees zeros,
        // so the pooled feature per filter is relu(bias); forward-evaluate the
        // dense layers on that by hand.
        let mut cat = Vec::new();
        for ks in KERNEL_SIZES {
            let b = params.expect(&format!("textcnn.conv{ks}.b"));
            for i in 0..cfg.cnn_filters {
                cat.push(b[[i]].max(0.0));
            }
        }
        let fw = params.expect("textcnn.fc.w");
        let fb = params.expect("textcnn.fc.b");
        for j in 0..cfg.t_dim {
            let mut acc = fb[[j]];
            for (i, x) in cat.iter().enumerate() {
                acc += x * fw[[i, j]];
            }
            let expect = acc.max(0.0);
            let got = tape.value(out.v_t)[[0, j]];
            assert!((got - expect).abs() < 1e-12, "dim {j}");
        }
    }

    #[test]
    fn doubling_filter_weights_doubles_its_activation() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(8, 0);
        let mut params = init_text_cnn(&cfg, v.size(), 3, &mut rng);
        let ids = vec![v.tokenize("a small red circle near the top")];

        let run = |params: &Params| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out = text_cnn_forward(&mut tape, &mut binder, params, &ids).unwrap();
            tape.value(out.conv_maps[0]).clone()
        };
        let base = run(&params);
        // double filter 2 of the width-3 kernel (weights and bias)
        {
            let w = params.get_mut("textcnn.conv3.w").unwrap();
            let mut f = w.index_axis_mut(ndarray::Axis(0), 2);
            f.mapv_inplace(|x| 2.0 * x);
            let b = params.get_mut("textcnn.conv3.b").unwrap();
            b[[2]] *= 2.0;
        }
        let doubled = run(&params);
        let l_out = base.shape()[3];
        for t in 0..l_out {
            let a = base[[0, 2, 0, t]];
            let d = doubled[[0, 2, 0, t]];
            assert!((d - 2.0 * a).abs() < 1e-12, "t {t}: {d} vs 2*{a}");
        }
        // other filters untouched
        for t in 0..l_out {
            assert_eq!(base[[0, 0, 0, t]], doubled[[0, 0, 0, t]]);
        }
    }

    #[test]
    fn v_t_invariant_to_trailing_padding() {
        // same caption, longer pad tail: v_t unchanged when the pad row is zero
        let caption = "a small red circle";
        let cfg8 = toy_cfg();
        let cfg12 = TextConfig { max_len: 12, ..toy_cfg() };
        let v8 = vocab();
        let mut v12 = vocab();
        v12.max_len = 12;
        let mut rng = stream(9, 0);
        let params = init_text_cnn(&cfg8, v8.size(), 3, &mut rng);
        let _ = cfg12;

        let run = |ids: Vec<u32>| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let out = text_cnn_forward(&mut tape, &mut binder, &params, &[ids]).unwrap();
            tape.value(out.v_t).clone()
        };
        let a = run(v8.tokenize(caption));
        let b = run(v12.tokenize(caption));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_vocab_id() {
        let cfg = toy_cfg();
        let v = vocab();
        let mut rng = stream(10, 0);
        let params = init_text_cnn(&cfg, v.size(), 3, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bad = vec![vec![9999u32; 8]];
        assert!(text_cnn_forward(&mut tape, &mut binder, &params, &bad).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // joint check through text CNN + conditioning KL on a tiny model
        let cfg = TextConfig {
            max_len: 6,
            embed_dim: 4,
            phi_dim: 3,
            c_dim: 2,
            cnn_embed_dim: 4,
            cnn_filters: 3,
            t_dim: 4,
        };
        let v = Vocabulary::build(["red circle small top left big"].into_iter(), 6);
        let mut rng = stream(11, 0);
        let enc = init_text_encoder(&cfg, v.size(), &mut rng);
        let mut cnn = init_text_cnn(&cfg, v.size(), 3, &mut rng);
        // move CA projections off zero so the KL path has curvature
        *cnn.get_mut("textcnn.fc.b").unwrap() = normal(&[cfg.t_dim], 0.3, &mut rng);
        let mut enc_rand = enc.clone();
        *enc_rand.get_mut("ca.mu.w").unwrap() = normal(&[cfg.phi_dim, cfg.c_dim], 0.8, &mut rng);
        *enc_rand.get_mut("ca.logsig.w").unwrap() =
            normal(&[cfg.phi_dim, cfg.c_dim], 0.5, &mut rng);

        let ids = vec![v.tokenize("red circle small top"), v.tokenize("left big red")];
        let eps = sample_condition_noise(2, cfg.c_dim, &mut rng);
        let labels = vec![1usize, 2];

        let names: Vec<String> = enc_rand.names().chain(cnn.names()).map(|s| s.to_string()).collect();
        let arrays: Vec<ArrayD<f64>> = names
            .iter()
            .map(|n| enc_rand.get(n).or_else(|| cnn.get(n)).unwrap().clone())
            .collect();

        let res = check_gradients(
            |tape, leaf_ids| {
                let mut p = Params::new();
                for (name, &leaf) in names.iter().zip(leaf_ids.iter()) {
                    p.insert(name.clone(), tape.value(leaf).clone());
                }
                // bind leaves directly so gradients flow to the check inputs
                let mut binder = Binder::new();
                for (name, &leaf) in names.iter().zip(leaf_ids.iter()) {
                    binder_insert(&mut binder, name, leaf);
                }
                let phi = embed_text(tape, &mut binder, &p, &ids).unwrap();
                let cond = condition(tape, &mut binder, &p, phi, &eps).unwrap();
                let out = text_cnn_forward(tape, &mut binder, &p, &ids).unwrap();
                let xent = tape.softmax_xent(out.logits, &labels);
                let ce = tape.mean(xent);
                let csum = tape.sum(cond.c);
                let csq = tape.mul(csum, csum);
                let a = tape.add(ce, cond.kl);
                tape.add(a, csq)
            },
            &arrays,
            1e-5,
            1e-4,
            Some(40),
            13,
        );
        assert!(res.max_rel_err < 1e-4, "rel err {}", res.max_rel_err);
    }

    // test-only backdoor to preload a Binder with existing leaves
    fn binder_insert(binder: &mut Binder, name: &str, id: NodeId) {
        binder.insert_bound(name, id);
    }
}
