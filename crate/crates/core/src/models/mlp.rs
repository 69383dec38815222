use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

use super::{Classifier, Prediction, WeightsFile};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

/// Two affine layers with a nonlinearity in between, over an area-downsampled
/// image.
///
/// Input features are `rgb / 255` of the `input_size x input_size`
/// downsample, row-major with interleaved channels. The representation layer
/// is the hidden layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMlp {
    pub input_size: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `hidden x (3 * input_size^2)`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
    pub has_representation: bool,
}

impl TinyMlp {
    pub fn zeros(input_size: usize, hidden: usize, classes: usize) -> Self {
        let d = 3 * input_size * input_size;
        Self {
            input_size,
            hidden,
            classes,
            w1: vec![0.0; hidden * d],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
            activation: Activation::Tanh,
            has_representation: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 * self.input_size * self.input_size
    }

    pub fn from_weights(w: &WeightsFile) -> Result<Self> {
        w.validate()?;
        w.expect_shapes(&[&[None, None], &[None], &[None, None], &[None]])?;
        let (hidden, d) = (w.shapes[0][0], w.shapes[0][1]);
        let side = ((d / 3) as f64).sqrt().round() as usize;
        if side == 0 || 3 * side * side != d {
            return Err(Error::format(format!(
                "tiny_mlp: input dimension {d} is not 3 * s^2"
            )));
        }
        let classes = w.shapes[2][0];
        if w.shapes[1][0] != hidden || w.shapes[2][1] != hidden || w.shapes[3][0] != classes {
            return Err(Error::format(format!(
                "tiny_mlp: inconsistent shapes {:?}",
                w.shapes
            )));
        }
        Ok(Self {
            input_size: side,
            hidden,
            classes,
            w1: w.data[0].clone(),
            b1: w.data[1].clone(),
            w2: w.data[2].clone(),
            b2: w.data[3].clone(),
            activation: w.activation.unwrap_or_default(),
            has_representation: true,
        })
    }

    pub fn to_weights(&self) -> WeightsFile {
        WeightsFile {
            kind: "tiny_mlp".into(),
            activation: Some(self.activation),
            shapes: vec![
                vec![self.hidden, self.input_dim()],
                vec![self.hidden],
                vec![self.classes, self.hidden],
                vec![self.classes],
            ],
            data: vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()],
        }
    }

    fn hidden_layer(&self, image: &ImageTensor) -> Vec<f64> {
        let x = area_downsample(image, self.input_size);
        let d = self.input_dim();
        self.w1
            .chunks_exact(d)
            .zip(&self.b1)
            .map(|(row, b)| self.activation.apply(dot(row, &x) + b))
            .collect()
    }
}

impl Classifier for TinyMlp {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn predict(&self, image: &ImageTensor) -> Result<Prediction> {
        let h = self.hidden_layer(image);
        let logits = self
            .w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, &h) + b)
            .collect();
        Ok(Prediction { logits })
    }

    fn representation(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if !self.has_representation {
            return Err(Error::Capability("representation layer"));
        }
        Ok(self.hidden_layer(image))
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.input_size)
    }
}

/// Dot product with four independent accumulators, so the adds do not form
/// one long dependency chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Source-pixel weights of each output cell along one axis (box filter with
/// fractional overlap).
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Area-average resample to `side x side`, returning `rgb / 255` features
/// row-major with interleaved channels.
pub fn area_downsample(image: &ImageTensor, side: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let wy = axis_weights(h, side);
    let wx = axis_weights(w, side);
    let data = image.data();
    // rows first: side x w x 3
    let mut rows = vec![0.0; side * w * 3];
    for (oy, taps) in wy.iter().enumerate() {
        let out = &mut rows[oy * w * 3..(oy + 1) * w * 3];
        for &(y, wt) in taps {
            let src = &data[y * w * 3..(y + 1) * w * 3];
            for (o, &s) in out.iter_mut().zip(src) {
                *o += wt * s as f64;
            }
        }
    }
    let mut out = vec![0.0; side * side * 3];
    for oy in 0..side {
        for (ox, taps) in wx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(x, wt) in taps {
                let o = (oy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * rows[o + c];
                }
            }
            let o = (oy * side + ox) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] / 255.0;
            }
        }
    }
    out
}
