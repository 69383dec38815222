//! Concept discovery: segment embeddings, k-means clustering, semantic edges.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, NeighborGraph};
use crate::models::{Classifier, MaskingPolicy};
use crate::segmentation::{Granularity, LabelMap, Segment};
use crate::tensor::ImageTensor;

/// Identifies one segment of one image at one granularity.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub image_id: String,
    pub level: Granularity,
    pub segment_id: usize,
}

impl SegmentRef {
    pub fn new(image_id: impl Into<String>, level: Granularity, segment_id: usize) -> Self {
        Self {
            image_id: image_id.into(),
            level,
            segment_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub segment: SegmentRef,
    pub vector: Vec<f64>,
}

fn resize_target(model: &dyn Classifier, image: &ImageTensor) -> (usize, usize) {
    match model.input_size() {
        Some(s) => (s, s),
        None => (image.height(), image.width()),
    }
}

/// Representation of a whole image, resized the same way segments are.
pub fn image_embedding(model: &dyn Classifier, image: &ImageTensor) -> Result<Vec<f64>> {
    let (h, w) = resize_target(model, image);
    model.representation(&image.resize_bicubic(h, w))
}

/// Representation of one segment: its bounding box is cropped, pixels outside
/// the segment are filled per `policy` (resolved on the whole image), and the
/// crop is bicubic-resized to the model's input size.
pub fn extract_embedding(
    model: &dyn Classifier,
    image: &ImageTensor,
    map: &LabelMap,
    segment: &Segment,
    policy: MaskingPolicy,
) -> Result<Vec<f64>> {
    if (map.height(), map.width()) != (image.height(), image.width()) {
        return Err(Error::domain("label map and image dimensions differ"));
    }
    if segment.id >= map.segment_count() {
        return Err(Error::domain(format!("segment {} is not in the label map", segment.id)));
    }
    let fill = policy.fill_for(image);
    let bb = segment.bounding_box;
    let mut crop = image.crop(bb.y0, bb.x0, bb.y1, bb.x1);
    let cw = bb.x1 - bb.x0;
    for y in bb.y0..bb.y1 {
        for x in bb.x0..bb.x1 {
            if map.label(y, x) as usize != segment.id {
                crop.set_pixel_at((y - bb.y0) * cw + (x - bb.x0), fill);
            }
        }
    }
    let (h, w) = resize_target(model, image);
    let v = model.representation(&crop.resize_bicubic(h, w))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite embedding"));
    }
    Ok(v)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned center.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        let newest = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, newest));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean distance.
///
/// Stops when assignments no longer change or after `max_iter` rounds. An
/// emptied cluster keeps its previous center.
pub fn kmeans(points: &[Vec<f64>], m: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    if m == 0 {
        return Err(Error::domain("k-means needs at least one cluster"));
    }
    if points.len() < m {
        return Err(Error::domain(format!(
            "k-means with {m} clusters needs at least {m} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::domain("embeddings have inconsistent dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(points, m, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            inertia += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((center, sum), count) in centers.iter_mut().zip(sums).zip(counts) {
            if count > 0 {
                *center = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    let inertia = assignment
        .iter()
        .zip(points)
        .map(|(&a, p)| dist2(p, &centers[a]))
        .sum();
    Ok(Clustering {
        centers,
        assignment,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    pub segment: SegmentRef,
    /// `None` when the segment's cluster was dropped as an outlier.
    pub concept: Option<usize>,
    pub cluster: usize,
    /// Squared distance to the cluster center.
    pub distance: f64,
}

/// Concepts of one class: k-means clusters over that class's segments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConceptModel {
    pub class_id: usize,
    pub m: usize,
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<ConceptAssignment>,
    /// Members per cluster; zero for dropped clusters.
    pub member_counts: Vec<usize>,
    pub dropped: Vec<usize>,
    pub min_cluster_size: usize,
    #[serde(skip)]
    index: HashMap<SegmentRef, usize>,
}

impl PartialEq for ConceptModel {
    fn eq(&self, other: &Self) -> bool {
        self.class_id == other.class_id
            && self.m == other.m
            && self.centers == other.centers
            && self.assignments == other.assignments
            && self.member_counts == other.member_counts
            && self.dropped == other.dropped
    }
}

/// Smallest cluster kept as a concept: `max(3, ceil(0.5% of segments))`.
pub fn min_cluster_size(total_segments: usize) -> usize {
    (total_segments as f64 * 0.005).ceil().max(3.0) as usize
}

/// A concept with its members and the members nearest its center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub members: Vec<SegmentRef>,
    pub exemplars: Vec<SegmentRef>,
}

impl ConceptModel {
    /// Builds a model from a clustering of `segments` (same order as the
    /// clustered points). Clusters smaller than `min_size` are dropped.
    pub fn from_clustering(
        class_id: usize,
        segments: Vec<SegmentRef>,
        clustering: &Clustering,
        points: &[Vec<f64>],
        min_size: usize,
    ) -> Result<Self> {
        if segments.len() != clustering.assignment.len() || points.len() != segments.len() {
            return Err(Error::domain("segments, points and assignment lengths differ"));
        }
        let m = clustering.centers.len();
        let mut counts = vec![0usize; m];
        for &a in &clustering.assignment {
            counts[a] += 1;
        }
        let dropped: Vec<usize> = (0..m).filter(|&c| counts[c] < min_size).collect();
        let assignments = segments
            .into_iter()
            .zip(&clustering.assignment)
            .zip(points)
            .map(|((segment, &cluster), p)| ConceptAssignment {
                segment,
                concept: (!dropped.contains(&cluster)).then_some(cluster),
                cluster,
                distance: dist2(p, &clustering.centers[cluster]),
            })
            .collect();
        let member_counts = (0..m)
            .map(|c| if dropped.contains(&c) { 0 } else { counts[c] })
            .collect();
        let mut model = Self {
            class_id,
            m,
            centers: clustering.centers.clone(),
            assignments,
            member_counts,
            dropped,
            min_cluster_size: min_size,
            index: HashMap::new(),
        };
        model.reindex()?;
        Ok(model)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, a) in self.assignments.iter().enumerate() {
            if self.index.insert(a.segment.clone(), i).is_some() {
                return Err(Error::format(format!("segment {:?} assigned twice", a.segment)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut model: ConceptModel = serde_json::from_str(&text)?;
        model.reindex()?;
        Ok(model)
    }

    /// Concept of `segment`; `Ok(None)` for segments of dropped clusters,
    /// an error for segments that were never clustered.
    pub fn concept_of(&self, segment: &SegmentRef) -> Result<Option<usize>> {
        self.index
            .get(segment)
            .map(|&i| self.assignments[i].concept)
            .ok_or_else(|| Error::domain(format!("segment {segment:?} has no concept assignment")))
    }

    /// Ids of concepts that survived outlier dropping.
    pub fn active_concepts(&self) -> Vec<usize> {
        (0..self.m).filter(|&c| self.member_counts[c] > 0).collect()
    }

    /// Active concepts with their members and `q` nearest exemplars.
    pub fn concepts(&self, q: usize) -> Vec<Concept> {
        self.active_concepts()
            .into_iter()
            .map(|id| {
                let mut members: Vec<&ConceptAssignment> =
                    self.assignments.iter().filter(|a| a.concept == Some(id)).collect();
                let refs = members.iter().map(|a| a.segment.clone()).collect();
                members.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.segment.cmp(&b.segment)));
                Concept {
                    id,
                    members: refs,
                    exemplars: members.iter().take(q).map(|a| a.segment.clone()).collect(),
                }
            })
            .collect()
    }
}

/// Semantic edges among `instance_segments` (graph players are their positions
/// in the slice): every pair from the same image and level sharing a concept.
/// Segments of dropped clusters get no semantic edges.
pub fn semantic_edges(model: &ConceptModel, instance_segments: &[SegmentRef]) -> Result<NeighborGraph> {
    let concepts = instance_segments
        .iter()
        .map(|s| model.concept_of(s))
        .collect::<Result<Vec<_>>>()?;
    let mut g = NeighborGraph::new(instance_segments.len());
    for a in 0..instance_segments.len() {
        for b in a + 1..instance_segments.len() {
            let same_place = instance_segments[a].image_id == instance_segments[b].image_id
                && instance_segments[a].level == instance_segments[b].level;
            if same_place && concepts[a].is_some() && concepts[a] == concepts[b] {
                g.add_edge(a, b, EdgeKind::Semantic);
            }
        }
    }
    Ok(g)
}

/// Writes `image_id,level,segment_id,e0..e(D-1)`.
pub fn write_embeddings_csv(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.vector.len());
    let mut out = String::from("image_id,level,segment_id");
    for d in 0..dim {
        write!(out, ",e{d}").unwrap();
    }
    out.push('\n');
    for e in embeddings {
        write!(out, "{},{},{}", e.segment.image_id, e.segment.level, e.segment.segment_id).unwrap();
        for v in &e.vector {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<Embedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::format(format!("{}:{}: malformed embedding row", path.display(), line + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let mut fields = line.split(',');
            let image_id = fields.next().ok_or_else(|| bad(n))?.to_string();
            let level = fields.next().and_then(Granularity::parse).ok_or_else(|| bad(n))?;
            let segment_id = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad(n))?;
            let vector = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad(n)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Embedding {
                segment: SegmentRef::new(image_id, level, segment_id),
                vector,
            })
        })
        .collect()
}
