//! Synthetic colored-blob dataset and classifiers built to solve it.
//!
//! Each image is a gray two-tone background with luminance noise and one disk
//! whose hue identifies the class. Class hues are evenly spaced on the chroma
//! plane around mid gray, so background luminance carries no class signal.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{LinearColor, TinyMlp};
use crate::tensor::ImageTensor;

const GRAY: f64 = 128.0;
/// Distance of each class color from gray, in 0..255 units.
const CHROMA: f64 = 100.0;
/// Detector input grid: the image is area-averaged to this side.
const INPUT_SIDE: usize = 8;
/// Detector windows are `WINDOW x WINDOW` input cells placed every `STRIDE`.
const WINDOW: usize = 3;
const STRIDE: usize = 1;
/// Window coverage (fraction of the class chroma) at which a detector turns
/// on. It sits above cos(72 deg) so an adjacent hue never fires, and above the
/// largest blob share so a mean-color fill never does.
const COVERAGE_THRESHOLD: f64 = 0.4;
const DETECTOR_GAIN: f64 = 100.0;
const LUMA_UNIT_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 40,
            size: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub id: String,
    pub label: usize,
    pub image: ImageTensor,
    /// Pixel indices covered by the class blob.
    pub blob: Vec<usize>,
}

/// Unit chroma direction of class `j` in normalized RGB.
pub fn class_direction(j: usize, classes: usize) -> [f64; 3] {
    let theta = 2.0 * PI * j as f64 / classes as f64;
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let e1 = [2.0 / s6, -1.0 / s6, -1.0 / s6];
    let e2 = [0.0, 1.0 / s2, -1.0 / s2];
    [0, 1, 2].map(|c| theta.cos() * e1[c] + theta.sin() * e2[c])
}

pub fn class_color(j: usize, classes: usize) -> [u8; 3] {
    class_direction(j, classes).map(|d| (GRAY + CHROMA * d).round().clamp(0.0, 255.0) as u8)
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn draw(label: usize, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, Vec<usize>)> {
    let n = cfg.size;
    let (dark, light) = (rng.random_range(70.0..110.0), rng.random_range(150.0..190.0));
    // background split along a random line through the image
    let angle = rng.random_range(0.0..PI);
    let (ny, nx) = (angle.sin(), angle.cos());
    let offset = rng.random_range(-0.25..0.25) * n as f64;
    let radius = rng.random_range(0.18..0.22) * n as f64;
    let cy = rng.random_range(radius..n as f64 - radius);
    let cx = rng.random_range(radius..n as f64 - radius);
    let color = class_color(label, cfg.classes);
    let mut blob = Vec::new();
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = (fy - cy).powi(2) + (fx - cx).powi(2) <= radius * radius;
            let px = if inside {
                blob.push(y * n + x);
                color.map(|c| clamp_u8(c as f64 + rng.random_range(-6.0..6.0)))
            } else {
                let side = (fy - n as f64 / 2.0) * ny + (fx - n as f64 / 2.0) * nx > offset;
                let base = if side { light } else { dark } + rng.random_range(-10.0..10.0);
                [0; 3].map(|_| clamp_u8(base + rng.random_range(-3.0..3.0)))
            };
            data.extend_from_slice(&px);
        }
    }
    Ok((ImageTensor::new(n, n, data)?, blob))
}

/// Generates `classes x per_class` images, deterministic in `cfg.seed`.
pub fn generate(cfg: &ToyConfig) -> Result<Vec<ToyImage>> {
    if cfg.classes < 2 || cfg.per_class == 0 {
        return Err(Error::domain("toy dataset needs at least 2 classes and 1 image per class"));
    }
    if cfg.size < 16 {
        return Err(Error::domain("toy images must be at least 16 pixels wide"));
    }
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for label in 0..cfg.classes {
        for idx in 0..cfg.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((label as u64) << 32) | idx as u64);
            let (image, blob) = draw(label, cfg, &mut rng)?;
            out.push(ToyImage {
                id: format!("c{label}_{idx:03}"),
                label,
                image,
                blob,
            });
        }
    }
    Ok(out)
}

/// Tiny MLP whose hidden units are hue detectors over overlapping windows.
///
/// Unit `(j, w)` is `gain * (mean chroma of class j in window w - threshold)`;
/// class `j`'s logit sums its detectors after tanh. One extra unit per input
/// cell carries its luminance around mid gray; these do not feed the logits but
/// give background layouts room in the representation. A small descending
/// output bias makes class 0 win when no detector fires.
pub fn detector_mlp(classes: usize) -> TinyMlp {
    let windows: Vec<usize> = (0..=INPUT_SIDE - WINDOW).step_by(STRIDE).collect();
    let per_class = windows.len() * windows.len();
    let detectors = classes * per_class;
    let cells = INPUT_SIDE * INPUT_SIDE;
    let hidden = detectors + cells;
    let mut m = TinyMlp::zeros(INPUT_SIDE, hidden, classes);
    let d = m.input_dim();
    let cell_weight = 1.0 / (WINDOW * WINDOW) as f64;
    let threshold = COVERAGE_THRESHOLD * CHROMA / 255.0;
    for j in 0..classes {
        let dir = class_direction(j, classes);
        for (wi, &wy) in windows.iter().enumerate() {
            for (wj, &wx) in windows.iter().enumerate() {
                let unit = j * per_class + wi * windows.len() + wj;
                let row = &mut m.w1[unit * d..(unit + 1) * d];
                for y in wy..wy + WINDOW {
                    for x in wx..wx + WINDOW {
                        for c in 0..3 {
                            row[(y * INPUT_SIDE + x) * 3 + c] = DETECTOR_GAIN * cell_weight * dir[c];
                        }
                    }
                }
                m.b1[unit] = -DETECTOR_GAIN * threshold;
                m.w2[j * hidden + unit] = 1.0;
            }
        }
        m.b2[j] = -0.05 * j as f64;
    }
    for p in 0..cells {
        let unit = detectors + p;
        for c in 0..3 {
            m.w1[unit * d + p * 3 + c] = LUMA_UNIT_SCALE / 3.0;
        }
        m.b1[unit] = -LUMA_UNIT_SCALE * GRAY / 255.0;
    }
    m
}

/// Linear color scorer projecting each pixel onto the class hue directions.
pub fn hue_linear(classes: usize) -> LinearColor {
    LinearColor::new(
        (0..classes).map(|j| class_direction(j, classes).map(|d| 0.01 * d)).collect(),
        vec![0.0; classes],
    )
}

/// Writes `images/<id>.png`, `labels.csv` and the model weight files under
/// `dir`. Returns the generated images.
pub fn write_dataset(dir: &Path, cfg: &ToyConfig) -> Result<Vec<ToyImage>> {
    let images = generate(cfg)?;
    let img_dir = dir.join("images");
    let model_dir = dir.join("models");
    for d in [&img_dir, &model_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut labels = String::from("image_id,label\n");
    for t in &images {
        t.image.save_png(&img_dir.join(format!("{}.png", t.id)))?;
        labels.push_str(&format!("{},{}\n", t.id, t.label));
    }
    let labels_path = dir.join("labels.csv");
    std::fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    detector_mlp(cfg.classes)
        .to_weights()
        .save(&model_dir.join("tiny_mlp.json"))?;
    hue_linear(cfg.classes)
        .to_weights()
        .save(&model_dir.join("linear_color.json"))?;
    Ok(images)
}
