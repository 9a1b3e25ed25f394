//! Captioned image datasets: a procedural toy generator, directory
//! ingestion, multi-scale pyramids, tag extraction, and stratified splits.
//!
//! Images are dense `[3, H, W]` arrays with values in `[-1, 1]` end to end;
//! ingestion normalizes on load and the generators never leave that range.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One labeled image with its captions and tag set.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    /// `[3, H, W]`, values in `[-1, 1]`.
    pub image: Array3<f64>,
    pub label: usize,
    pub captions: Vec<String>,
    pub tags: BTreeSet<String>,
    /// Stable identifier, also used as the on-disk file stem.
    pub id: String,
}

/// Images of one record at every stage scale, coarse to fine.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub levels: Vec<Array3<f64>>,
}

impl ImagePyramid {
    pub fn scales(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim().1).collect()
    }
}

/// A named fill color for the toy renderer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyColor {
    pub name: String,
    pub rgb: [f64; 3],
}

/// Specification of a procedural toy dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToySpec {
    pub num_classes: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<ToyColor>,
    /// Finest stage scale; the rendered image is `canvas x canvas`.
    pub canvas: usize,
    pub captions_per_image: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            shapes: vec!["circle".into(), "square".into()],
            colors: vec![
                ToyColor { name: "red".into(), rgb: [1.0, -1.0, -1.0] },
                ToyColor { name: "green".into(), rgb: [-1.0, 1.0, -1.0] },
            ],
            canvas: 16,
            captions_per_image: 3,
            samples_per_class: 75,
            seed: 7,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::config("shapes and colors must be non-empty"));
        }
        if self.num_classes != self.shapes.len() * self.colors.len() {
            return Err(Error::config(format!(
                "num_classes {} != shapes x colors = {}",
                self.num_classes,
                self.shapes.len() * self.colors.len()
            )));
        }
        if self.canvas == 0 || self.canvas % 4 != 0 {
            return Err(Error::config(format!(
                "canvas {} must be positive and divisible by 4 for the stage pyramid",
                self.canvas
            )));
        }
        if self.captions_per_image == 0 {
            return Err(Error::config("captions_per_image must be >= 1"));
        }
        for s in &self.shapes {
            if !KNOWN_SHAPES.contains(&s.as_str()) {
                return Err(Error::config(format!(
                    "unknown shape {s:?}; known: {KNOWN_SHAPES:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for shape in &self.shapes {
            for color in &self.colors {
                names.push(format!("{}_{}", color.name, shape));
            }
        }
        names
    }
}

pub const KNOWN_SHAPES: &[&str] = &["circle", "square", "triangle", "cross"];

const SIZES: &[(&str, f64)] = &[("small", 0.26), ("large", 0.38)];

const POSITIONS: &[(&str, f64, f64)] = &[
    ("top left", -1.0, -1.0),
    ("top right", 1.0, -1.0),
    ("bottom left", -1.0, 1.0),
    ("bottom right", 1.0, 1.0),
    ("center", 0.0, 0.0),
];

/// Ground-truth attributes recorded by the renderer for each toy image.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyAttributes {
    pub shape: String,
    pub color: String,
    pub size: String,
    pub position: String,
}

/// A generated toy dataset plus its renderer ground truth.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub spec: ToySpec,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub attrs: Vec<ToyAttributes>,
}

fn render_caption(template: usize, attr: &ToyAttributes) -> String {
    match template % 3 {
        0 => format!(
            "a {} {} {} near the {}",
            attr.size, attr.color, attr.shape, attr.position
        ),
        1 => format!(
            "the {} shows a {} {} {}",
            attr.position, attr.size, attr.color, attr.shape
        ),
        _ => format!(
            "there is a {} {} {} at the {}",
            attr.size, attr.color, attr.shape, attr.position
        ),
    }
}

fn render_shape(canvas: usize, shape: &str, rgb: [f64; 3], cx: f64, cy: f64, r: f64) -> Array3<f64> {
    let bg = -0.9;
    let mut img = Array3::from_elem((3, canvas, canvas), bg);
    for y in 0..canvas {
        for x in 0..canvas {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match shape {
                "circle" => dx * dx + dy * dy <= r * r,
                "square" => dx.abs() <= r * 0.9 && dy.abs() <= r * 0.9,
                "triangle" => {
                    // apex up, base at cy + r
                    dy >= -r && dy <= r && dx.abs() <= 0.9 * r * (dy + r) / (2.0 * r)
                }
                "cross" => {
                    (dx.abs() <= r * 0.35 || dy.abs() <= r * 0.35)
                        && dx.abs() <= r
                        && dy.abs() <= r
                }
                _ => unreachable!("validated shape"),
            };
            if inside {
                for c in 0..3 {
                    img[(c, y, x)] = rgb[c];
                }
            }
        }
    }
    img
}

/// Renders a balanced toy dataset deterministically from `spec`.
///
/// Each record's captions are template-rendered from its attributes, the
/// label encodes the (shape, color) class, and class balance is exact.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let class_names = spec.class_names();
    let stopwords = default_stopwords();
    let mut rng = stream(spec.seed, 0xD47A);
    let mut records = Vec::new();
    let mut attrs = Vec::new();

    let mut label = 0usize;
    for shape in &spec.shapes {
        for color in &spec.colors {
            for sample in 0..spec.samples_per_class {
                let (size_name, size_frac) = SIZES[rng.random_range(0..SIZES.len())];
                let (pos_name, ox, oy) = POSITIONS[rng.random_range(0..POSITIONS.len())];
                let r = size_frac * spec.canvas as f64 / 2.0;
                // keep the shape fully inside the canvas
                let margin = r + 1.0;
                let half = spec.canvas as f64 / 2.0;
                let max_off = (half - margin).max(0.0);
                let cx = half + ox * max_off * 0.8;
                let cy = half + oy * max_off * 0.8;

                let attr = ToyAttributes {
                    shape: shape.clone(),
                    color: color.name.clone(),
                    size: size_name.to_string(),
                    position: pos_name.to_string(),
                };
                let image = render_shape(spec.canvas, shape, color.rgb, cx, cy, r);
                let captions: Vec<String> = (0..spec.captions_per_image)
                    .map(|t| render_caption(t, &attr))
                    .collect();
                let tags = captions
                    .iter()
                    .flat_map(|c| extract_tags(c, stopwords))
                    .collect();
                records.push(ImageRecord {
                    image,
                    label,
                    captions,
                    tags,
                    id: format!("{}_{:04}", class_names[label], sample),
                });
                attrs.push(attr);
            }
            label += 1;
        }
    }
    Ok(ToyDataset {
        spec: spec.clone(),
        class_names,
        records,
        attrs,
    })
}

/// Area-average downsampling of one image to every requested scale.
///
/// `scales` must be strictly increasing with the finest equal to the image
/// size, and each scale must divide it evenly.
pub fn make_pyramid(image: &Array3<f64>, scales: &[usize]) -> Result<ImagePyramid> {
    let (_, h, w) = image.dim();
    if h != w {
        return Err(Error::shape(format!("image must be square, got {h}x{w}")));
    }
    if scales.is_empty() {
        return Err(Error::config("scales must be non-empty"));
    }
    for win in scales.windows(2) {
        if win[1] <= win[0] {
            return Err(Error::config(format!(
                "scales must be strictly increasing, got {scales:?}"
            )));
        }
    }
    let finest = *scales.last().unwrap();
    if finest != h {
        return Err(Error::shape(format!(
            "finest scale {finest} must equal image size {h}"
        )));
    }
    let mut levels = Vec::with_capacity(scales.len());
    for &s in scales {
        if s > h {
            return Err(Error::shape(format!("scale {s} exceeds source size {h}")));
        }
        if h % s != 0 {
            return Err(Error::config(format!(
                "scale {s} does not divide source size {h}"
            )));
        }
        levels.push(downsample_area(image, s));
    }
    Ok(ImagePyramid { levels })
}

/// Block-mean downsample to `target x target`; the factor must divide evenly.
pub fn downsample_area(image: &Array3<f64>, target: usize) -> Array3<f64> {
    let (c, h, _) = image.dim();
    let f = h / target;
    if f == 1 {
        return image.clone();
    }
    let mut out = Array3::<f64>::zeros((c, target, target));
    let norm = 1.0 / (f * f) as f64;
    for ci in 0..c {
        for y in 0..target {
            for x in 0..target {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += image[(ci, y * f + dy, x * f + dx)];
                    }
                }
                out[(ci, y, x)] = acc * norm;
            }
        }
    }
    out
}

/// Lowercases, strips punctuation, removes stopwords, and deduplicates.
pub fn extract_tags(caption: &str, stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    caption
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .map(|t| t.to_string())
        .collect()
}

static STOPWORDS: LazyLock<BTreeSet<String>> = LazyLock::new(|| {
    include_str!("../assets/stopwords.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
});

/// The fixed 30-word function-word list shipped with the crate.
pub fn default_stopwords() -> &'static BTreeSet<String> {
    &STOPWORDS
}

/// Stratified, deterministic train/test split. Test counts are allocated by
/// largest remainder so the total matches `round(n * test_fraction)`.
pub fn split(
    dataset: &[ImageRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_label: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, r) in dataset.iter().enumerate() {
        match by_label.binary_search_by_key(&r.label, |(l, _)| *l) {
            Ok(pos) => by_label[pos].1.push(i),
            Err(pos) => by_label.insert(pos, (r.label, vec![i])),
        }
    }
    for (label, idxs) in &by_label {
        if idxs.len() < 2 {
            return Err(Error::data(format!(
                "class {label} has {} sample(s); need at least 2 to split",
                idxs.len()
            )));
        }
    }

    let total = dataset.len();
    let target_total = ((total as f64) * test_fraction).round() as usize;
    let target_total = target_total.clamp(by_label.len().min(total), total - by_label.len());

    // floor allocation + largest remainder, ties by label order
    let mut alloc: Vec<(usize, usize, f64)> = by_label
        .iter()
        .map(|(label, idxs)| {
            let exact = idxs.len() as f64 * test_fraction;
            (*label, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = alloc.iter().map(|(_, f, _)| *f).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| {
        alloc[b]
            .2
            .partial_cmp(&alloc[a].2)
            .unwrap()
            .then(alloc[a].0.cmp(&alloc[b].0))
    });
    let mut cursor = 0;
    while assigned < target_total {
        let i = order[cursor % order.len()];
        // never empty a class entirely on either side
        if alloc[i].1 + 1 < by_label[i].1.len() {
            alloc[i].1 += 1;
            assigned += 1;
        }
        cursor += 1;
        if cursor > 4 * order.len() && assigned < target_total {
            break;
        }
    }

    let mut rng = stream(seed, 0x5417);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((_, idxs), (_, n_test, _)) in by_label.iter().zip(alloc.iter()) {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        for (pos, &i) in shuffled.iter().enumerate() {
            if pos < *n_test {
                test.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        train.into_iter().map(|i| dataset[i].clone()).collect(),
        test.into_iter().map(|i| dataset[i].clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Persistence: `<root>/<class_name>/<id>.png` + `<root>/captions/<id>.txt`
// ---------------------------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

fn image_to_rgb8(image: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image[(0, y, x)]),
                    to_u8(image[(1, y, x)]),
                    to_u8(image[(2, y, x)]),
                ]),
            );
        }
    }
    out
}

fn rgb8_to_image(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                out[(c, y as usize, x as usize)] = p.0[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// Saves one image as PNG.
pub fn save_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    image_to_rgb8(image).save(path)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyMetaRecord {
    pub id: String,
    pub class: String,
    pub label: usize,
    pub attributes: ToyAttributes,
    pub captions: Vec<String>,
}

/// `meta.json` contents written next to a persisted toy dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyMeta {
    pub spec: ToySpec,
    pub class_names: Vec<String>,
    pub records: Vec<ToyMetaRecord>,
}

/// Persists a toy dataset in the ingestion layout plus `meta.json`.
pub fn save_toy_dataset(ds: &ToyDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("captions"))?;
    let mut meta_records = Vec::new();
    for (record, attr) in ds.records.iter().zip(ds.attrs.iter()) {
        let class = &ds.class_names[record.label];
        let class_dir = root.join(class);
        fs::create_dir_all(&class_dir)?;
        save_png(&record.image, &class_dir.join(format!("{}.png", record.id)))?;
        fs::write(
            root.join("captions").join(format!("{}.txt", record.id)),
            record.captions.join("\n") + "\n",
        )?;
        meta_records.push(ToyMetaRecord {
            id: record.id.clone(),
            class: class.clone(),
            label: record.label,
            attributes: attr.clone(),
            captions: record.captions.clone(),
        });
    }
    let meta = ToyMeta {
        spec: ds.spec.clone(),
        class_names: ds.class_names.clone(),
        records: meta_records,
    };
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Per-file failures collected while loading a dataset directory.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub records_loaded: usize,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub path: PathBuf,
    pub reason: String,
}

/// Loads `<root>/<class_name>/<id>.(png|jpg)` with captions from
/// `<root>/captions/<id>.txt`, resizing every image to `canvas` and
/// normalizing to `[-1, 1]`. Unreadable images and missing or empty caption
/// files are skipped and noted in the report.
pub fn load_dataset(root: &Path, canvas: usize) -> Result<(Vec<ImageRecord>, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::data(format!("{} is not a directory", root.display())));
    }
    let stopwords = default_stopwords();
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "captions"))
        .collect();
    class_dirs.sort();

    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(class_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for file in files {
            let id = file.file_stem().unwrap().to_string_lossy().to_string();
            let caption_path = root.join("captions").join(format!("{id}.txt"));
            let captions: Vec<String> = match fs::read_to_string(&caption_path) {
                Ok(text) => text
                    .lines()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect(),
                Err(e) => {
                    report.skipped.push(SkippedRecord {
                        path: caption_path.clone(),
                        reason: format!("caption file unreadable: {e}"),
                    });
                    continue;
                }
            };
            if captions.is_empty() {
                report.skipped.push(SkippedRecord {
                    path: caption_path,
                    reason: "caption file has no captions".into(),
                });
                continue;
            }
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(e) => {
                    report.skipped.push(SkippedRecord {
                        path: file.clone(),
                        reason: format!("unreadable image: {e}"),
                    });
                    continue;
                }
            };
            let img = img.to_rgb8();
            let img = if img.dimensions() != (canvas as u32, canvas as u32) {
                image::imageops::resize(
                    &img,
                    canvas as u32,
                    canvas as u32,
                    image::imageops::FilterType::Triangle,
                )
            } else {
                img
            };
            let tags = captions
                .iter()
                .flat_map(|c| extract_tags(c, stopwords))
                .collect();
            records.push(ImageRecord {
                image: rgb8_to_image(&img),
                label,
                captions,
                tags,
                id,
            });
        }
    }
    report.records_loaded = records.len();
    Ok((records, report))
}
