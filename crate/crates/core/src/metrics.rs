//! Concept-score criteria (coherency, complexity, faithfulness) and the
//! add/remove accuracy curves.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::concepts::{Concept, SegmentRef};
use crate::error::{Error, Result};
use crate::explain::ConceptScore;
use crate::models::{fill_pixels, Classifier, MaskingPolicy};
use crate::tensor::ImageTensor;

/// Clamp applied to concept scores before normalizing them into a distribution.
pub const SCORE_FLOOR: f64 = 1e-12;

fn undefined(msg: impl Into<String>) -> Error {
    Error::UndefinedMetric(msg.into())
}

/// Pearson correlation. Undefined for fewer than two points or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(undefined("correlation needs at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(undefined("correlation of a constant vector"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties share their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine similarity between each member's segment embedding and the
/// embedding of its source image. Zero-norm pairs are skipped.
pub fn concept_coherency(
    concept: &Concept,
    segment_embeddings: &HashMap<SegmentRef, Vec<f64>>,
    image_embeddings: &HashMap<String, Vec<f64>>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for member in &concept.members {
        let seg = segment_embeddings
            .get(member)
            .ok_or_else(|| Error::domain(format!("no embedding for segment {member:?}")))?;
        let img = image_embeddings
            .get(&member.image_id)
            .ok_or_else(|| Error::domain(format!("no embedding for image {}", member.image_id)))?;
        match cosine(img, seg) {
            Some(c) => {
                sum += c;
                n += 1;
            }
            None => log::warn!("zero-norm embedding for {member:?}; skipped in coherency"),
        }
    }
    if n == 0 {
        return Err(undefined(format!("concept {} has no usable embeddings", concept.id)));
    }
    Ok(sum / n as f64)
}

/// Pearson correlation between top-k concept scores and their coherencies.
pub fn coherency_score(scores: &[f64], etas: &[f64]) -> Result<f64> {
    pearson(scores, etas)
}

/// Entropy of the top-k scores after clamping at [`SCORE_FLOOR`] and
/// normalizing to sum 1. Undefined when every score is non-positive.
pub fn complexity(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::domain("complexity needs at least one score"));
    }
    if scores.iter().all(|&s| s <= 0.0) {
        return Err(undefined("all concept scores are non-positive"));
    }
    let clamped: Vec<f64> = scores.iter().map(|&s| s.max(SCORE_FLOOR)).collect();
    let total: f64 = clamped.iter().sum();
    Ok(-clamped
        .iter()
        .map(|s| {
            let p = s / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// One image with the pixels a concept covers in it (possibly none).
pub struct ConceptRegion<'a> {
    pub image: &'a ImageTensor,
    pub pixels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDegradation {
    /// Mean class-k logit drop when the concept is removed from each image.
    pub phi: f64,
    /// `phi` divided by the concept's member count.
    pub phi_normalized: f64,
    pub member_count: usize,
}

pub fn concept_degradation(
    model: &dyn Classifier,
    regions: &[ConceptRegion<'_>],
    member_count: usize,
    class_k: usize,
    policy: MaskingPolicy,
) -> Result<ConceptDegradation> {
    if member_count == 0 {
        return Err(Error::domain("concept has no members"));
    }
    if regions.is_empty() {
        return Err(Error::domain("degradation needs at least one image"));
    }
    if class_k >= model.class_count() {
        return Err(Error::domain(format!("class {class_k} out of range")));
    }
    let mut total = 0.0;
    for r in regions {
        if r.pixels.is_empty() {
            continue;
        }
        let full = model.predict(r.image)?.logits[class_k];
        let masked = fill_pixels(r.image, r.pixels.iter().copied(), policy.fill_for(r.image));
        total += full - model.predict(&masked)?.logits[class_k];
    }
    let phi = total / regions.len() as f64;
    Ok(ConceptDegradation {
        phi,
        phi_normalized: phi / member_count as f64,
        member_count,
    })
}

/// Pearson correlation between top-k concept scores and their normalized
/// degradations.
pub fn faithfulness_score(scores: &[f64], phis: &[f64]) -> Result<f64> {
    pearson(scores, phis)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CurveMode {
    /// Start fully masked, restore the top-k concepts.
    #[serde(rename = "SSC_add")]
    SscAdd,
    /// Mask the top-k concepts.
    #[serde(rename = "SDC_remove")]
    SdcRemove,
    /// Start fully masked, restore the bottom-k concepts.
    #[serde(rename = "least_add")]
    LeastAdd,
    /// Mask the bottom-k concepts.
    #[serde(rename = "least_remove")]
    LeastRemove,
}

impl CurveMode {
    pub const ALL: [CurveMode; 4] = [Self::SscAdd, Self::SdcRemove, Self::LeastAdd, Self::LeastRemove];

    pub fn name(self) -> &'static str {
        match self {
            Self::SscAdd => "SSC_add",
            Self::SdcRemove => "SDC_remove",
            Self::LeastAdd => "least_add",
            Self::LeastRemove => "least_remove",
        }
    }

    fn keeps_only_selection(self) -> bool {
        matches!(self, Self::SscAdd | Self::LeastAdd)
    }

    fn uses_bottom(self) -> bool {
        matches!(self, Self::LeastAdd | Self::LeastRemove)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub top_k: usize,
    pub accuracy: f64,
    pub mode: CurveMode,
    pub instances: usize,
}

/// A labeled image with the pixels of every concept present in it.
pub struct CurveInstance<'a> {
    pub image: &'a ImageTensor,
    pub label: usize,
    pub concept_pixels: HashMap<usize, Vec<usize>>,
}

fn instance_correct(
    model: &dyn Classifier,
    inst: &CurveInstance<'_>,
    selected: &[usize],
    mode: CurveMode,
    policy: MaskingPolicy,
) -> Result<bool> {
    let mut chosen = BTreeSet::new();
    for c in selected {
        if let Some(px) = inst.concept_pixels.get(c) {
            chosen.extend(px.iter().copied());
        }
    }
    let fill = policy.fill_for(inst.image);
    let masked = if mode.keeps_only_selection() {
        fill_pixels(
            inst.image,
            (0..inst.image.pixel_count()).filter(|p| !chosen.contains(p)),
            fill,
        )
    } else {
        fill_pixels(inst.image, chosen.iter().copied(), fill)
    };
    Ok(model.predict(&masked)?.argmax() == inst.label)
}

/// Argmax accuracy over `instances` for every mode and every k in `ks`.
/// `ranking` is ordered best first; top-k takes its head, bottom-k its tail.
pub fn ssc_sdc_curves(
    ranking: &[ConceptScore],
    instances: &[CurveInstance<'_>],
    model: &dyn Classifier,
    policy: MaskingPolicy,
    ks: &[usize],
) -> Result<Vec<CurvePoint>> {
    if instances.is_empty() {
        return Err(Error::domain("curves need at least one instance"));
    }
    let order: Vec<usize> = ranking.iter().map(|s| s.concept).collect();
    let mut points = Vec::new();
    for mode in CurveMode::ALL {
        for &k in ks {
            let k = k.min(order.len());
            let selected = if mode.uses_bottom() {
                &order[order.len() - k..]
            } else {
                &order[..k]
            };
            let mut correct = 0usize;
            for inst in instances {
                if instance_correct(model, inst, selected, mode, policy)? {
                    correct += 1;
                }
            }
            points.push(CurvePoint {
                top_k: k,
                accuracy: correct as f64 / instances.len() as f64,
                mode,
                instances: instances.len(),
            });
        }
    }
    Ok(points)
}

/// Accuracy of the unmasked images.
pub fn full_accuracy(instances: &[CurveInstance<'_>], model: &dyn Classifier) -> Result<f64> {
    let mut correct = 0usize;
    for inst in instances {
        if model.predict(inst.image)?.argmax() == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptCriteria {
    pub concept: usize,
    pub score: f64,
    pub eta: f64,
    pub phi: f64,
    pub phi_normalized: f64,
    pub member_count: usize,
}

/// Top-k criteria of one class. A metric is `None` when undefined, with the
/// reason in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub class_id: usize,
    pub k: usize,
    pub coherency: Option<f64>,
    pub complexity: Option<f64>,
    pub faithfulness: Option<f64>,
    pub concepts: Vec<ConceptCriteria>,
    pub undefined: Vec<String>,
}

impl CriteriaReport {
    pub fn from_concepts(class_id: usize, k: usize, concepts: Vec<ConceptCriteria>) -> Result<Self> {
        let scores: Vec<f64> = concepts.iter().map(|c| c.score).collect();
        let etas: Vec<f64> = concepts.iter().map(|c| c.eta).collect();
        let phis: Vec<f64> = concepts.iter().map(|c| c.phi_normalized).collect();
        let mut undefined = Vec::new();
        let mut keep = |name: &str, r: Result<f64>| -> Result<Option<f64>> {
            match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(msg)) => {
                    undefined.push(format!("{name}: {msg}"));
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };
        let coherency = keep("coherency", coherency_score(&scores, &etas))?;
        let complexity = keep("complexity", complexity(&scores))?;
        let faithfulness = keep("faithfulness", faithfulness_score(&scores, &phis))?;
        Ok(Self {
            class_id,
            k,
            coherency,
            complexity,
            faithfulness,
            concepts,
            undefined,
        })
    }
}
