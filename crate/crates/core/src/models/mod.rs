//! Black-box classifiers, masking, and the bridge from an image to a coalition game.

mod adapter;
mod game;
mod linear;
mod mlp;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Coalition;
use crate::segmentation::LabelMap;
use crate::tensor::ImageTensor;

pub use adapter::{AdapterClassifier, AdapterHandle};
pub use game::{build_game, build_game_with, CoalitionSemantics, ImageGame};
pub use linear::LinearColor;
pub use mlp::{area_downsample, Activation, TinyMlp};

/// Pre-softmax class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
}

impl Prediction {
    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// A model that maps an image to class logits.
pub trait Classifier: Send + Sync {
    fn class_count(&self) -> usize;

    fn predict(&self, image: &ImageTensor) -> Result<Prediction>;

    /// Output of the representation layer used for concept embeddings.
    fn representation(&self, _image: &ImageTensor) -> Result<Vec<f64>> {
        Err(Error::Capability("representation layer"))
    }

    /// Square input side the model resamples to, if it has one.
    fn input_size(&self) -> Option<usize> {
        None
    }
}

/// How removed segments are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingPolicy {
    Zero,
    /// The per-image mean color of the unmasked image.
    #[default]
    MeanColor,
    Constant([u8; 3]),
}

impl MaskingPolicy {
    /// Fill color for `image` (the original, unmasked image).
    pub fn fill_for(&self, image: &ImageTensor) -> [u8; 3] {
        match *self {
            MaskingPolicy::Zero => [0, 0, 0],
            MaskingPolicy::MeanColor => image.mean_color(),
            MaskingPolicy::Constant(rgb) => rgb,
        }
    }
}

/// Replaces the pixels of the listed pixels with `fill`.
pub fn fill_pixels(image: &ImageTensor, pixels: impl IntoIterator<Item = usize>, fill: [u8; 3]) -> ImageTensor {
    let mut out = image.clone();
    for p in pixels {
        out.set_pixel_at(p, fill);
    }
    out
}

/// Removes the segments in `remove` from `image`, filling their pixels per `policy`.
pub fn mask(image: &ImageTensor, map: &LabelMap, remove: &Coalition, policy: MaskingPolicy) -> Result<ImageTensor> {
    mask_with_fill(image, map, remove, policy.fill_for(image))
}

/// [`mask`] with an already resolved fill color.
pub fn mask_with_fill(image: &ImageTensor, map: &LabelMap, remove: &Coalition, fill: [u8; 3]) -> Result<ImageTensor> {
    if (map.height(), map.width()) != (image.height(), image.width()) {
        return Err(Error::domain("label map and image dimensions differ"));
    }
    if let Some(m) = remove.max_member() {
        if m >= map.segment_count() {
            return Err(Error::domain(format!(
                "segment {m} not in a map with {} segments",
                map.segment_count()
            )));
        }
    }
    let pixels = map
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| remove.contains(l as usize))
        .map(|(p, _)| p);
    Ok(fill_pixels(image, pixels, fill))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearColor,
    TinyMlp,
    Adapter,
}

fn default_true() -> bool {
    true
}

fn default_timeout_ms() -> u64 {
    10_000
}

/// Reference to a model: built-in kinds load their weights from a JSON file,
/// adapters are spawned from `command`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    /// Required for adapters; checked against the weights for built-in kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    /// Whether the representation layer may be used for embeddings.
    #[serde(default = "default_true")]
    pub representation: bool,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Adapter processes to spawn.
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_pool() -> usize {
    1
}

impl ModelSpec {
    pub fn from_weights(kind: ModelKind, path: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            weights_path: Some(path.into()),
            command: Vec::new(),
            class_count: None,
            representation: true,
            timeout_ms: default_timeout_ms(),
            pool: 1,
        }
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        if let Some(p) = &self.weights_path {
            if p.is_relative() {
                self.weights_path = Some(base.join(p));
            }
        }
        self
    }

    pub fn load(&self) -> Result<Arc<dyn Classifier>> {
        let model: Arc<dyn Classifier> = match self.kind {
            ModelKind::LinearColor | ModelKind::TinyMlp => {
                let path = self
                    .weights_path
                    .as_deref()
                    .ok_or_else(|| Error::format("built-in model needs weights_path"))?;
                let weights = WeightsFile::load(path)?;
                let expected = match self.kind {
                    ModelKind::LinearColor => "linear_color",
                    _ => "tiny_mlp",
                };
                if weights.kind != expected {
                    return Err(Error::format(format!(
                        "{}: weights are for {:?}, spec says {expected:?}",
                        path.display(),
                        weights.kind
                    )));
                }
                match self.kind {
                    ModelKind::LinearColor => {
                        let mut m = LinearColor::from_weights(&weights)?;
                        m.has_representation = self.representation;
                        Arc::new(m)
                    }
                    _ => {
                        let mut m = TinyMlp::from_weights(&weights)?;
                        m.has_representation = self.representation;
                        Arc::new(m)
                    }
                }
            }
            ModelKind::Adapter => {
                let classes = self
                    .class_count
                    .ok_or_else(|| Error::format("adapter model needs class_count"))?;
                Arc::new(AdapterClassifier::spawn(
                    &self.command,
                    classes,
                    self.pool.max(1),
                    Duration::from_millis(self.timeout_ms),
                )?)
            }
        };
        if let Some(c) = self.class_count {
            if c != model.class_count() {
                return Err(Error::format(format!(
                    "spec declares {c} classes, model has {}",
                    model.class_count()
                )));
            }
        }
        if model.class_count() < 2 {
            return Err(Error::format("a classifier needs at least 2 classes"));
        }
        Ok(model)
    }
}

/// Weight file: tensors listed in a fixed order per model kind, each flattened
/// row-major in `data` with its dimensions in `shapes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub kind: String,
    /// Hidden nonlinearity for models that have one; `tanh` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
}

impl WeightsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: WeightsFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() != self.data.len() {
            return Err(Error::format(format!(
                "{} shapes for {} tensors",
                self.shapes.len(),
                self.data.len()
            )));
        }
        for (i, (shape, data)) in self.shapes.iter().zip(&self.data).enumerate() {
            let n: usize = shape.iter().product();
            if n != data.len() {
                return Err(Error::format(format!(
                    "tensor {i}: shape {shape:?} needs {n} values, got {}",
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("tensor {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub(crate) fn expect_shapes(&self, expected: &[&[Option<usize>]]) -> Result<()> {
        if self.shapes.len() != expected.len() {
            return Err(Error::format(format!(
                "{} expects {} tensors, got {}",
                self.kind,
                expected.len(),
                self.shapes.len()
            )));
        }
        for (i, (shape, want)) in self.shapes.iter().zip(expected).enumerate() {
            let ok = shape.len() == want.len()
                && shape.iter().zip(want.iter()).all(|(s, w)| w.is_none_or(|w| w == *s));
            if !ok {
                return Err(Error::format(format!(
                    "{} tensor {i} has shape {shape:?}, expected {want:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}
