use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

use super::{Classifier, Prediction, WeightsFile};

/// Per-pixel linear color scorer: `logit_k = sum_p <w_k, rgb(p) / 255> + b_k`.
///
/// Works at the image's native resolution, so removal games built on it are
/// exactly additive over segments. Its representation layer is the mean
/// normalized color.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearColor {
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
    pub has_representation: bool,
}

impl LinearColor {
    pub fn new(weights: Vec<[f64; 3]>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), bias.len());
        Self {
            weights,
            bias,
            has_representation: true,
        }
    }

    pub fn from_weights(w: &WeightsFile) -> Result<Self> {
        w.validate()?;
        w.expect_shapes(&[&[None, Some(3)], &[None]])?;
        let classes = w.shapes[0][0];
        if w.shapes[1][0] != classes {
            return Err(Error::format(format!(
                "linear_color: {classes} weight rows but {} biases",
                w.shapes[1][0]
            )));
        }
        Ok(Self::new(
            w.data[0].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            w.data[1].clone(),
        ))
    }

    pub fn to_weights(&self) -> WeightsFile {
        WeightsFile {
            activation: None,
            kind: "linear_color".into(),
            shapes: vec![vec![self.weights.len(), 3], vec![self.bias.len()]],
            data: vec![self.weights.iter().flatten().copied().collect(), self.bias.clone()],
        }
    }

    /// Channel sums of `rgb / 255`.
    fn color_mass(image: &ImageTensor) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in image.pixels() {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        sums.map(|s| s as f64 / 255.0)
    }

    /// Logit change for class `k` when the pixels `pixels` change from their
    /// colors in `image` to `fill`. This is the closed-form value of removing
    /// those pixels.
    pub fn removal_value(&self, image: &ImageTensor, pixels: &[usize], fill: [u8; 3], k: usize) -> f64 {
        let mut diff = [0i64; 3];
        for &p in pixels {
            let px = image.pixel_at(p);
            for c in 0..3 {
                diff[c] += px[c] as i64 - fill[c] as i64;
            }
        }
        (0..3).map(|c| self.weights[k][c] * diff[c] as f64 / 255.0).sum()
    }
}

impl Classifier for LinearColor {
    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        let mass = Self::color_mass(image);
        let logits = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w[0] * mass[0] + w[1] * mass[1] + w[2] * mass[2] + b)
            .collect();
        Ok(Prediction { logits })
    }

    fn representation(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if !self.has_representation {
            return Err(Error::Capability("representation layer"));
        }
        let n = image.pixel_count() as f64;
        Ok(Self::color_mass(image).iter().map(|m| m / n).collect())
    }
}
