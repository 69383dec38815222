//! Per-segment attribution, saliency maps and concept importances.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::concepts::{semantic_edges, ConceptModel, SegmentRef};
use crate::error::{Error, Result};
use crate::graph::{Ablation, NeighborGraph};
use crate::models::{build_game, Classifier, MaskingPolicy};
use crate::segmentation::{adjacency, Granularity, LabelMap, SegmentationSet};
use crate::shapley::{cone_shap_all, Method, SamplerConfig};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub level: Granularity,
    pub values: Vec<f64>,
    pub evals_used: usize,
}

/// Attribution values for every segment of one image, per level (logit units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentScoreTable {
    pub image_id: String,
    pub class_k: usize,
    pub method: Method,
    pub k: usize,
    #[serde(rename = "M")]
    pub draws: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub levels: Vec<LevelScores>,
}

impl SegmentScoreTable {
    pub fn level(&self, level: Granularity) -> Option<&LevelScores> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn value(&self, segment: &SegmentRef) -> Option<f64> {
        if segment.image_id != self.image_id {
            return None;
        }
        self.level(segment.level)?.values.get(segment.segment_id).copied()
    }

    /// `(segment, value)` rows in level then segment order.
    pub fn rows(&self) -> impl Iterator<Item = (SegmentRef, f64)> + '_ {
        self.levels.iter().flat_map(move |l| {
            l.values
                .iter()
                .enumerate()
                .map(move |(s, &v)| (SegmentRef::new(self.image_id.clone(), l.level, s), v))
        })
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut t = self.clone();
        for l in &mut t.levels {
            for v in &mut l.values {
                *v *= factor;
            }
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,level,segment_id,value\n");
        for (r, v) in self.rows() {
            writeln!(out, "{},{},{},{v}", r.image_id, r.level, r.segment_id).unwrap();
        }
        out
    }
}

/// Physical adjacency of `map`, plus semantic edges from `concepts` when given,
/// filtered by `ablation`.
pub fn level_graph(
    image_id: &str,
    level: Granularity,
    map: &LabelMap,
    concepts: Option<&ConceptModel>,
    ablation: Ablation,
) -> Result<NeighborGraph> {
    let physical = adjacency(map);
    let graph = match concepts {
        Some(model) => {
            let refs: Vec<SegmentRef> = (0..map.segment_count())
                .map(|s| SegmentRef::new(image_id, level, s))
                .collect();
            physical.union(&semantic_edges(model, &refs)?)
        }
        None => physical,
    };
    Ok(graph.ablate(ablation))
}

/// Settings shared by every instance attribution of a run.
#[derive(Clone, Debug)]
pub struct AttributionSettings {
    pub class_k: usize,
    pub policy: MaskingPolicy,
    pub sampler: SamplerConfig,
    pub ablation: Ablation,
}

/// CONE-SHAP value of every segment at every level of `seg_set`, with the
/// neighbor graph being physical adjacency united with semantic edges.
pub fn attribute_instance(
    model: Arc<dyn Classifier>,
    image: &ImageTensor,
    seg_set: &SegmentationSet,
    concepts: Option<&ConceptModel>,
    settings: &AttributionSettings,
) -> Result<SegmentScoreTable> {
    settings.sampler.validate()?;
    let levels = seg_set
        .levels
        .iter()
        .map(|lvl| {
            let graph = level_graph(&seg_set.image_id, lvl.level, &lvl.map, concepts, settings.ablation)?;
            let game = build_game(model.clone(), image, &lvl.map, settings.class_k, settings.policy)?;
            let phi = cone_shap_all(&game, &graph, &settings.sampler)?;
            Ok(LevelScores {
                level: lvl.level,
                values: phi.values,
                evals_used: phi.evals_used,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentScoreTable {
        image_id: seg_set.image_id.clone(),
        class_k: settings.class_k,
        method: Method::ConeShap,
        k: settings.sampler.k,
        draws: settings.sampler.draws,
        seed: settings.sampler.seed,
        ablation: settings.ablation,
        levels,
    })
}

/// Per-pixel scores in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

fn scale_by_max_abs(values: &mut [f64]) {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for v in values {
            *v /= max;
        }
    }
}

/// Paints each segment's pixels with its value and scales by the max-abs.
pub fn level_saliency(values: &[f64], map: &LabelMap) -> Result<Vec<f64>> {
    if values.len() != map.segment_count() {
        return Err(Error::domain(format!(
            "{} scores for {} segments",
            values.len(),
            map.segment_count()
        )));
    }
    let mut painted: Vec<f64> = map.labels().iter().map(|&l| values[l as usize]).collect();
    scale_by_max_abs(&mut painted);
    Ok(painted)
}

/// Averages the per-level saliency maps with equal weights and rescales the
/// result by its max-abs. All-zero scores give an all-zero map.
pub fn saliency(table: &SegmentScoreTable, seg_set: &SegmentationSet) -> Result<SaliencyMap> {
    let first = seg_set
        .levels
        .first()
        .ok_or_else(|| Error::domain("segmentation set has no levels"))?;
    let (h, w) = (first.map.height(), first.map.width());
    let mut acc = vec![0.0; h * w];
    for lvl in &seg_set.levels {
        let scores = table
            .level(lvl.level)
            .ok_or_else(|| Error::domain(format!("score table lacks level {}", lvl.level)))?;
        for (a, v) in acc.iter_mut().zip(level_saliency(&scores.values, &lvl.map)?) {
            *a += v;
        }
    }
    let n = seg_set.levels.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    scale_by_max_abs(&mut acc);
    Ok(SaliencyMap {
        image_id: seg_set.image_id.clone(),
        height: h,
        width: w,
        scores: acc,
    })
}

impl SaliencyMap {
    /// Diverging colormap: white at zero, red for positive, green for negative.
    pub fn to_image(&self) -> Result<ImageTensor> {
        let data = self
            .scores
            .iter()
            .flat_map(|&s| {
                let fade = (255.0 * (1.0 - s.abs().min(1.0))).round() as u8;
                if s >= 0.0 {
                    [255, fade, fade]
                } else {
                    [fade, 255, fade]
                }
            })
            .collect();
        ImageTensor::new(self.height, self.width, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image()?.save_png(path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptImportance {
    pub concept: usize,
    pub value: f64,
}

/// Concepts present in one instance with the summed values of their segments,
/// sorted by descending value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConceptImportance {
    pub image_id: String,
    pub normalized: bool,
    pub concepts: Vec<ConceptImportance>,
}

impl InstanceConceptImportance {
    pub fn top(&self, k: usize) -> &[ConceptImportance] {
        &self.concepts[..k.min(self.concepts.len())]
    }
}

fn sort_desc(items: &mut [ConceptImportance]) {
    items.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.concept.cmp(&b.concept)));
}

/// Sums each concept's member-segment values within one instance. Concepts
/// with no segment in the instance are omitted. With `normalize`, values are
/// divided by the sum of their absolute values.
pub fn instance_concept_importance(
    table: &SegmentScoreTable,
    model: &ConceptModel,
    normalize: bool,
) -> Result<InstanceConceptImportance> {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for (r, v) in table.rows() {
        if let Some(c) = model.concept_of(&r)? {
            *sums.entry(c).or_default() += v;
        }
    }
    let mut concepts: Vec<ConceptImportance> = sums
        .into_iter()
        .map(|(concept, value)| ConceptImportance { concept, value })
        .collect();
    if normalize {
        let total: f64 = concepts.iter().map(|c| c.value.abs()).sum();
        if total > 0.0 {
            for c in &mut concepts {
                c.value /= total;
            }
        }
    }
    sort_desc(&mut concepts);
    Ok(InstanceConceptImportance {
        image_id: table.image_id.clone(),
        normalized: normalize,
        concepts,
    })
}

/// Class-level score of one concept: mean value over its member segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: usize,
    pub score: f64,
    pub member_count: usize,
    /// Dense rank by descending score, starting at 1.
    pub rank: usize,
}

/// Mean value of each concept's member segments over all class instances,
/// ranked descending. Concepts without scored members are left out.
pub fn class_concept_scores(tables: &[SegmentScoreTable], model: &ConceptModel) -> Result<Vec<ConceptScore>> {
    let mut sums = vec![0.0; model.m];
    let mut counts = vec![0usize; model.m];
    for table in tables {
        for (r, v) in table.rows() {
            if let Some(c) = model.concept_of(&r)? {
                sums[c] += v;
                counts[c] += 1;
            }
        }
    }
    let mut scores = Vec::new();
    for c in 0..model.m {
        if counts[c] == 0 {
            if model.dropped.contains(&c) {
                continue;
            }
            log::warn!("concept {c} of class {} has no scored members; excluded", model.class_id);
            continue;
        }
        if counts[c] != model.member_counts[c] {
            log::warn!(
                "concept {c}: {} of {} members scored",
                counts[c],
                model.member_counts[c]
            );
        }
        scores.push(ConceptScore {
            concept: c,
            score: sums[c] / counts[c] as f64,
            member_count: counts[c],
            rank: 0,
        });
    }
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.concept.cmp(&b.concept)));
    let mut rank = 0;
    let mut last = None;
    for s in &mut scores {
        if last != Some(s.score) {
            rank += 1;
            last = Some(s.score);
        }
        s.rank = rank;
    }
    Ok(scores)
}
