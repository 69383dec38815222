//! File-based pipeline: segment, discover concepts, attribute, explain and
//! evaluate a folder of images.
//!
//! Output layout under `RunConfig::output`:
//!
//! ```text
//! segments/<image>/<level>.png|.json   16-bit label maps and sidecars
//! embeddings/class_<c>.csv             segment embeddings
//! embeddings/class_<c>_images.csv      whole-image embeddings
//! concepts/class_<c>.json              concept model
//! concepts/class_<c>_concepts.json     members and exemplars
//! attributions/<run>/class_<c>/<image>.json|.csv|_saliency.png|_concepts.json
//! reports/<run>/...                    concept scores, criteria, curves
//! reports/sweep.json|.csv
//! ```
//!
//! `<run>` names the attribution settings, e.g. `k5_M1_seed0_full`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{
    extract_embedding, image_embedding, kmeans, min_cluster_size, read_embeddings_csv, write_embeddings_csv,
    ConceptModel, Embedding, SegmentRef,
};
use crate::error::{Error, Result};
use crate::explain::{
    attribute_instance, class_concept_scores, instance_concept_importance, saliency, AttributionSettings,
    ConceptScore, SegmentScoreTable,
};
use crate::graph::Ablation;
use crate::metrics::{
    concept_coherency, concept_degradation, full_accuracy, ssc_sdc_curves, ConceptCriteria, ConceptRegion,
    CriteriaReport, CurveInstance, CurveMode, CurvePoint,
};
use crate::models::{Classifier, MaskingPolicy, ModelKind, ModelSpec};
use crate::segmentation::{
    multi_resolution_segment, Granularity, LabelMap, LabelMapSidecar, LevelSegmentation, SegmentationConfig,
    SegmentationSet,
};
use crate::shapley::SamplerConfig;
use crate::tensor::ImageTensor;
use crate::toy::{write_dataset, ToyConfig};

fn default_k() -> usize {
    5
}
fn default_draws() -> usize {
    1
}
fn default_resolutions() -> [usize; 3] {
    Granularity::ALL.map(Granularity::default_target)
}
fn default_clusters() -> usize {
    20
}
fn default_images() -> PathBuf {
    PathBuf::from("images")
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_jobs() -> usize {
    1
}
fn default_top_k() -> usize {
    5
}
fn default_max_iter() -> usize {
    100
}
fn default_exemplars() -> usize {
    5
}
fn default_compactness() -> f64 {
    10.0
}
fn default_slic_iterations() -> usize {
    10
}
fn default_curve_ks() -> Vec<usize> {
    (1..=5).collect()
}
fn default_sweep_k() -> Vec<usize> {
    (1..=5).collect()
}
fn default_sweep_m() -> Vec<usize> {
    (1..=3).collect()
}

/// Everything a pipeline run depends on. Relative paths are resolved against
/// the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(rename = "M", default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_resolutions")]
    pub resolutions: [usize; 3],
    /// Concepts (k-means clusters) per class.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default)]
    pub masking: MaskingPolicy,
    pub model: ModelSpec,
    /// Restrict class-level commands to one class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default = "default_images")]
    pub images: PathBuf,
    /// `image_id,label` CSV. Without it, classes come from model predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Worker threads. Outputs do not depend on it.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_exemplars")]
    pub exemplars: usize,
    #[serde(default = "default_compactness")]
    pub compactness: f64,
    #[serde(default = "default_slic_iterations")]
    pub slic_iterations: usize,
    /// Divide per-instance concept importances by their absolute sum.
    #[serde(default)]
    pub normalize_instance: bool,
    #[serde(default = "default_curve_ks")]
    pub curve_ks: Vec<usize>,
    #[serde(default = "default_sweep_k")]
    pub sweep_k: Vec<usize>,
    #[serde(default = "default_sweep_m", rename = "sweep_M")]
    pub sweep_draws: Vec<usize>,
}

impl RunConfig {
    pub fn new(model: ModelSpec) -> Self {
        serde_json::from_value(serde_json::json!({ "model": model })).expect("defaults deserialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(cfg.rebase(base))
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.images);
        fix(&mut self.output);
        if let Some(l) = &mut self.labels {
            fix(l);
        }
        self.model = self.model.rebase(base);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        if self.clusters == 0 {
            return Err(Error::format("clusters must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(Error::format("top_k must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::format("jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig::new(self.k, self.draws, self.seed)
    }

    pub fn segmentation(&self) -> SegmentationConfig {
        SegmentationConfig {
            targets: self.resolutions,
            compactness: self.compactness,
            iterations: self.slic_iterations,
            ..SegmentationConfig::default()
        }
    }

    /// Directory name for the attribution settings of this config.
    pub fn run_name(&self) -> String {
        let ablation = match self.ablation {
            Ablation::None => "full",
            Ablation::NoPhysical => "no-physical",
            Ablation::NoSemantic => "no-semantic",
        };
        format!("k{}_M{}_seed{}_{ablation}", self.k, self.draws, self.seed)
    }

    fn dir(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.output.clone(), |p, s| p.join(s))
    }

    pub fn segments_dir(&self, image_id: &str) -> PathBuf {
        self.dir(&["segments", image_id])
    }
    pub fn embeddings_path(&self, class: usize) -> PathBuf {
        self.dir(&["embeddings", &format!("class_{class}.csv")])
    }
    pub fn image_embeddings_path(&self, class: usize) -> PathBuf {
        self.dir(&["embeddings", &format!("class_{class}_images.csv")])
    }
    pub fn concept_model_path(&self, class: usize) -> PathBuf {
        self.dir(&["concepts", &format!("class_{class}.json")])
    }
    pub fn attributions_dir(&self, class: usize) -> PathBuf {
        self.dir(&["attributions", &self.run_name(), &format!("class_{class}")])
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.dir(&["reports", &self.run_name()])
    }
}

/// Runs `f` on a rayon pool with `jobs` threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::format(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn missing(what: &str, path: &Path, command: &str) -> Error {
    Error::Precondition(format!(
        "{what} not found at {}; run `cone-shap {command}` first",
        path.display()
    ))
}

/// Image files (`.png`, `.ppm`, `.pnm`) in `dir`, sorted by id (file stem).
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::format(format!("{}: non UTF-8 file name", path.display())))?
                .to_string();
            if id.contains(',') {
                return Err(Error::format(format!("{}: image ids may not contain commas", path.display())));
            }
            out.push((id, path));
        }
    }
    out.sort();
    for w in out.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::format(format!("two images share the id {:?}", w[0].0)));
        }
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("{}:{}: expected image_id,label", path.display(), n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{}:{}: bad label {label:?}", path.display(), n + 1)))?;
        labels.insert(id.trim().to_string(), label);
    }
    Ok(labels)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub images: usize,
    pub label_maps: usize,
}

fn segment_one(cfg: &RunConfig, id: &str, path: &Path) -> Result<usize> {
    let image = ImageTensor::load(path)?;
    let set = multi_resolution_segment(&image, id, &cfg.segmentation())?;
    let dir = cfg.segments_dir(id);
    create_dir(&dir)?;
    for lvl in &set.levels {
        lvl.map.save_png16(&dir.join(format!("{}.png", lvl.level)))?;
        write_json(&dir.join(format!("{}.json", lvl.level)), &lvl.sidecar(id))?;
    }
    Ok(set.levels.len())
}

/// Segments every image at the three granularities. Images that fail are
/// reported together after the others have been written.
pub fn cmd_segment(cfg: &RunConfig) -> Result<SegmentSummary> {
    let images = list_images(&cfg.images)?;
    if images.is_empty() {
        log::warn!("no images found in {}", cfg.images.display());
        return Ok(SegmentSummary::default());
    }
    let results: Vec<Result<usize>> = with_jobs(cfg.jobs, || {
        images
            .par_iter()
            .map(|(id, path)| segment_one(cfg, id, path))
            .collect()
    })?;
    let mut summary = SegmentSummary::default();
    let mut failures = Vec::new();
    for ((id, _), r) in images.iter().zip(results) {
        match r {
            Ok(n) => {
                summary.images += 1;
                summary.label_maps += n;
            }
            Err(e) => {
                log::error!("{id}: {e}");
                failures.push(e);
            }
        }
    }
    match failures.len() {
        0 => Ok(summary),
        1 => Err(failures.pop().unwrap()),
        _ => Err(Error::format(
            failures.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "),
        )),
    }
}

/// Reads the label maps and sidecars written by [`cmd_segment`].
pub fn load_segmentation(cfg: &RunConfig, image_id: &str) -> Result<SegmentationSet> {
    let dir = cfg.segments_dir(image_id);
    let levels = Granularity::ALL
        .iter()
        .map(|&level| {
            let png = dir.join(format!("{level}.png"));
            if !png.exists() {
                return Err(missing(&format!("segmentation of {image_id}"), &png, "segment"));
            }
            let map = LabelMap::load_png16(&png)?;
            let sidecar: LabelMapSidecar = read_json(&dir.join(format!("{level}.json")))?;
            if sidecar.segment_count != map.segment_count() || sidecar.level != level {
                return Err(Error::format(format!("{}: sidecar does not match label map", png.display())));
            }
            Ok(LevelSegmentation {
                level,
                target: sidecar.target,
                map,
                segments: sidecar.segments,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationSet {
        image_id: image_id.to_string(),
        levels,
    })
}

/// A loaded dataset: images with their class.
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

pub struct DatasetItem {
    pub id: String,
    pub label: usize,
    pub image: ImageTensor,
}

impl Dataset {
    /// Loads every image; labels come from the labels file, or from the
    /// model's prediction on the full image when there is none.
    pub fn load(cfg: &RunConfig, model: &dyn Classifier) -> Result<Self> {
        let files = list_images(&cfg.images)?;
        let labels = match &cfg.labels {
            Some(path) => Some(load_labels(path)?),
            None => None,
        };
        let items = files
            .into_par_iter()
            .map(|(id, path)| {
                let image = ImageTensor::load(&path)?;
                let label = match &labels {
                    Some(l) => *l
                        .get(&id)
                        .ok_or_else(|| Error::format(format!("image {id} has no label")))?,
                    None => model.predict(&image)?.argmax(),
                };
                if label >= model.class_count() {
                    return Err(Error::format(format!(
                        "image {id}: label {label} out of range for a {}-class model",
                        model.class_count()
                    )));
                }
                Ok(DatasetItem { id, label, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    /// Classes to process: the configured one, or every class with images.
    pub fn classes(&self, cfg: &RunConfig) -> Vec<usize> {
        match cfg.class_id {
            Some(c) => vec![c],
            None => self.items.iter().map(|i| i.label).collect::<BTreeSet<_>>().into_iter().collect(),
        }
    }

    pub fn of_class(&self, class: usize) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.label == class).collect()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }
}

/// Model and dataset shared by the commands after segmentation.
pub struct Context {
    pub cfg: RunConfig,
    pub model: Arc<dyn Classifier>,
    pub data: Arc<Dataset>,
}

impl Context {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model.load()?;
        let data = with_jobs(cfg.jobs, || Dataset::load(cfg, model.as_ref()))??;
        if data.items.is_empty() {
            log::warn!("no images found in {}", cfg.images.display());
        }
        Ok(Self {
            cfg: cfg.clone(),
            model,
            data: Arc::new(data),
        })
    }

    fn class_items(&self, class: usize) -> Result<Vec<&DatasetItem>> {
        if class >= self.model.class_count() {
            return Err(Error::domain(format!(
                "class {class} out of range for a {}-class model",
                self.model.class_count()
            )));
        }
        let items = self.data.of_class(class);
        if items.is_empty() {
            log::warn!("class {class} has no images");
        }
        Ok(items)
    }

    pub fn load_concept_model(&self, class: usize) -> Result<ConceptModel> {
        let path = self.cfg.concept_model_path(class);
        if !path.exists() {
            return Err(missing(&format!("concept model for class {class}"), &path, "discover"));
        }
        ConceptModel::load(&path)
    }
}

fn write_image_embeddings(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("image_id");
    for d in 0..dim {
        write!(out, ",e{d}").unwrap();
    }
    out.push('\n');
    for (id, v) in rows {
        out.push_str(id);
        for x in v {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_image_embeddings(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut f = line.split(',');
            let id = f.next().unwrap_or_default().to_string();
            let v = f
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(format!("{}: malformed row for {id}", path.display())))?;
            Ok((id, v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySummary {
    pub class_id: usize,
    pub images: usize,
    pub segments: usize,
    pub clusters: usize,
    pub active_concepts: usize,
    pub dropped: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn discover_class(ctx: &Context, class: usize) -> Result<DiscoverySummary> {
    let cfg = &ctx.cfg;
    let items = ctx.class_items(class)?;
    if items.is_empty() {
        return Err(Error::domain(format!("class {class} has no images to discover concepts from")));
    }
    let per_image: Vec<(Vec<Embedding>, Vec<f64>)> = items
        .par_iter()
        .map(|item| {
            let set = load_segmentation(cfg, &item.id)?;
            let mut out = Vec::new();
            for lvl in &set.levels {
                for seg in &lvl.segments {
                    out.push(Embedding {
                        segment: SegmentRef::new(&item.id, lvl.level, seg.id),
                        vector: extract_embedding(ctx.model.as_ref(), &item.image, &lvl.map, seg, cfg.masking)?,
                    });
                }
            }
            Ok((out, image_embedding(ctx.model.as_ref(), &item.image)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let image_rows: Vec<(String, Vec<f64>)> = items
        .iter()
        .zip(&per_image)
        .map(|(item, (_, v))| (item.id.clone(), v.clone()))
        .collect();
    let embeddings: Vec<Embedding> = per_image.into_iter().flat_map(|(e, _)| e).collect();
    write_embeddings_csv_at(&cfg.embeddings_path(class), &embeddings)?;
    write_image_embeddings(&cfg.image_embeddings_path(class), &image_rows)?;

    let m = cfg.clusters.min(embeddings.len());
    if m < cfg.clusters {
        log::warn!("class {class}: only {} segments, using {m} clusters", embeddings.len());
    }
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let clustering = kmeans(&points, m, cfg.seed.wrapping_add(class as u64), cfg.kmeans_max_iter)?;
    if !clustering.converged {
        log::warn!("class {class}: k-means stopped after {} iterations", clustering.iterations);
    }
    let refs = embeddings.into_iter().map(|e| e.segment).collect();
    let model = ConceptModel::from_clustering(class, refs, &clustering, &points, min_cluster_size(points.len()))?;
    write_json(&cfg.concept_model_path(class), &model)?;
    write_json(
        &cfg.dir(&["concepts", &format!("class_{class}_concepts.json")]),
        &model.concepts(cfg.exemplars),
    )?;
    Ok(DiscoverySummary {
        class_id: class,
        images: items.len(),
        segments: points.len(),
        clusters: m,
        active_concepts: model.active_concepts().len(),
        dropped: model.dropped.clone(),
        inertia: clustering.inertia,
        iterations: clustering.iterations,
    })
}

fn write_embeddings_csv_at(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_embeddings_csv(path, embeddings)
}

/// Extracts segment embeddings and clusters them into concepts, per class.
pub fn cmd_discover(ctx: &Context) -> Result<Vec<DiscoverySummary>> {
    let classes = ctx.data.classes(&ctx.cfg);
    with_jobs(ctx.cfg.jobs, || {
        classes
            .par_iter()
            .map(|&c| discover_class(ctx, c))
            .collect::<Result<Vec<_>>>()
    })?
}

fn attribution_settings(cfg: &RunConfig, class: usize) -> AttributionSettings {
    AttributionSettings {
        class_k: class,
        policy: cfg.masking,
        sampler: cfg.sampler(),
        ablation: cfg.ablation,
    }
}

fn table_matches(t: &SegmentScoreTable, cfg: &RunConfig, class: usize, id: &str) -> bool {
    t.image_id == id
        && t.class_k == class
        && t.k == cfg.k
        && t.draws == cfg.draws
        && t.seed == cfg.seed
        && t.ablation == cfg.ablation
        && t.levels.len() == Granularity::ALL.len()
}

/// Attributes one image (or reuses a matching table on disk) and writes the
/// table, its CSV, the saliency PNG and the per-instance concept importances.
fn explain_item(ctx: &Context, item: &DatasetItem, class: usize, concepts: &ConceptModel) -> Result<SegmentScoreTable> {
    let cfg = &ctx.cfg;
    let dir = cfg.attributions_dir(class);
    let table_path = dir.join(format!("{}.json", item.id));
    if table_path.exists() {
        if let Ok(t) = read_json::<SegmentScoreTable>(&table_path) {
            if table_matches(&t, cfg, class, &item.id) {
                return Ok(t);
            }
        }
    }
    let set = load_segmentation(cfg, &item.id)?;
    let table = attribute_instance(
        ctx.model.clone(),
        &item.image,
        &set,
        Some(concepts),
        &attribution_settings(cfg, class),
    )?;
    write_text(&dir.join(format!("{}.csv", item.id)), &table.to_csv())?;
    saliency(&table, &set)?.save_png(&dir.join(format!("{}_saliency.png", item.id)))?;
    write_json(
        &dir.join(format!("{}_concepts.json", item.id)),
        &instance_concept_importance(&table, concepts, cfg.normalize_instance)?,
    )?;
    write_json(&table_path, &table)?;
    Ok(table)
}

fn explain_items(ctx: &Context, items: &[&DatasetItem], class: usize, concepts: &ConceptModel) -> Result<Vec<SegmentScoreTable>> {
    items
        .par_iter()
        .map(|item| explain_item(ctx, item, class, concepts))
        .collect()
}

/// Attributes the given images (all images of the selected classes when
/// `image_ids` is empty) against their labeled class.
pub fn cmd_explain_instance(ctx: &Context, image_ids: &[String]) -> Result<Vec<SegmentScoreTable>> {
    let mut by_class: BTreeMap<usize, Vec<&DatasetItem>> = BTreeMap::new();
    if image_ids.is_empty() {
        for c in ctx.data.classes(&ctx.cfg) {
            by_class.insert(c, ctx.class_items(c)?);
        }
    } else {
        for id in image_ids {
            let item = ctx
                .data
                .get(id)
                .ok_or_else(|| Error::format(format!("no image with id {id:?} in {}", ctx.cfg.images.display())))?;
            by_class.entry(ctx.cfg.class_id.unwrap_or(item.label)).or_default().push(item);
        }
    }
    let mut tables = Vec::new();
    for (class, items) in by_class {
        let concepts = ctx.load_concept_model(class)?;
        tables.extend(with_jobs(ctx.cfg.jobs, || explain_items(ctx, &items, class, &concepts))??);
    }
    Ok(tables)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConceptReport {
    pub class_id: usize,
    pub images: usize,
    pub k: usize,
    #[serde(rename = "M")]
    pub draws: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Concepts dropped as outliers; excluded from scores and criteria.
    pub dropped_concepts: Vec<usize>,
    pub scores: Vec<ConceptScore>,
}

fn class_scores(ctx: &Context, class: usize) -> Result<(ClassConceptReport, ConceptModel, Vec<SegmentScoreTable>)> {
    let concepts = ctx.load_concept_model(class)?;
    let items = ctx.class_items(class)?;
    let tables = with_jobs(ctx.cfg.jobs, || explain_items(ctx, &items, class, &concepts))??;
    let scores = class_concept_scores(&tables, &concepts)?;
    let report = ClassConceptReport {
        class_id: class,
        images: items.len(),
        k: ctx.cfg.k,
        draws: ctx.cfg.draws,
        seed: ctx.cfg.seed,
        ablation: ctx.cfg.ablation,
        dropped_concepts: concepts.dropped.clone(),
        scores,
    };
    write_json(
        &ctx.cfg.reports_dir().join(format!("class_{class}_concept_scores.json")),
        &report,
    )?;
    Ok((report, concepts, tables))
}

/// Class-wise concept scores for every selected class.
pub fn cmd_explain_class(ctx: &Context) -> Result<Vec<ClassConceptReport>> {
    ctx.data
        .classes(&ctx.cfg)
        .into_iter()
        .map(|c| class_scores(ctx, c).map(|r| r.0))
        .collect()
}

/// Pixels covered by each concept in one image, across all levels.
fn concept_pixels(set: &SegmentationSet, concepts: &ConceptModel) -> Result<HashMap<usize, Vec<usize>>> {
    let mut acc: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for lvl in &set.levels {
        let pixels = lvl.map.segment_pixels();
        for (s, px) in pixels.into_iter().enumerate() {
            if let Some(c) = concepts.concept_of(&SegmentRef::new(&set.image_id, lvl.level, s))? {
                acc.entry(c).or_default().extend(px);
            }
        }
    }
    Ok(acc.into_iter().map(|(c, px)| (c, px.into_iter().collect())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEvaluation {
    pub class_id: usize,
    pub images: usize,
    pub full_accuracy: f64,
    pub criteria: CriteriaReport,
    pub curves: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run: String,
    pub classes: Vec<ClassEvaluation>,
    /// Curves averaged over classes (each class weighted equally).
    pub curves: Vec<CurvePoint>,
    pub full_accuracy: f64,
    pub undefined_metrics: Vec<String>,
}

fn class_curves(ctx: &Context, class: usize, ranking: &[ConceptScore], concepts: &ConceptModel) -> Result<(f64, Vec<CurvePoint>)> {
    let items = ctx.class_items(class)?;
    let regions = items
        .par_iter()
        .map(|item| concept_pixels(&load_segmentation(&ctx.cfg, &item.id)?, concepts))
        .collect::<Result<Vec<_>>>()?;
    let instances: Vec<CurveInstance<'_>> = items
        .iter()
        .zip(regions)
        .map(|(item, concept_pixels)| CurveInstance {
            image: &item.image,
            label: class,
            concept_pixels,
        })
        .collect();
    if instances.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let full = full_accuracy(&instances, ctx.model.as_ref())?;
    let curves = ssc_sdc_curves(ranking, &instances, ctx.model.as_ref(), ctx.cfg.masking, &ctx.cfg.curve_ks)?;
    Ok((full, curves))
}

fn evaluate_class(ctx: &Context, class: usize) -> Result<ClassEvaluation> {
    let cfg = &ctx.cfg;
    let (report, concepts, _) = class_scores(ctx, class)?;
    let items = ctx.class_items(class)?;
    let top: Vec<&ConceptScore> = report.scores.iter().take(cfg.top_k).collect();

    let emb_path = cfg.embeddings_path(class);
    if !emb_path.exists() {
        return Err(missing(&format!("embeddings for class {class}"), &emb_path, "discover"));
    }
    let segment_embeddings: HashMap<SegmentRef, Vec<f64>> = read_embeddings_csv(&emb_path)?
        .into_iter()
        .map(|e| (e.segment, e.vector))
        .collect();
    let image_embeddings = read_image_embeddings(&cfg.image_embeddings_path(class))?;
    let all_concepts = concepts.concepts(cfg.exemplars);
    let sets = items
        .par_iter()
        .map(|item| load_segmentation(cfg, &item.id))
        .collect::<Result<Vec<_>>>()?;
    let pixel_maps = sets
        .iter()
        .map(|s| concept_pixels(s, &concepts))
        .collect::<Result<Vec<_>>>()?;

    let rows = top
        .par_iter()
        .map(|score| {
            let concept = all_concepts
                .iter()
                .find(|c| c.id == score.concept)
                .ok_or_else(|| Error::domain(format!("concept {} has no members", score.concept)))?;
            let eta = concept_coherency(concept, &segment_embeddings, &image_embeddings)?;
            let regions: Vec<ConceptRegion<'_>> = items
                .iter()
                .zip(&pixel_maps)
                .map(|(item, px)| ConceptRegion {
                    image: &item.image,
                    pixels: px.get(&score.concept).cloned().unwrap_or_default(),
                })
                .collect();
            let d = concept_degradation(ctx.model.as_ref(), &regions, score.member_count, class, cfg.masking)?;
            Ok(ConceptCriteria {
                concept: score.concept,
                score: score.score,
                eta,
                phi: d.phi,
                phi_normalized: d.phi_normalized,
                member_count: score.member_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let criteria = CriteriaReport::from_concepts(class, cfg.top_k, rows)?;
    let (full, curves) = class_curves(ctx, class, &report.scores, &concepts)?;
    let dir = cfg.reports_dir();
    write_json(&dir.join(format!("class_{class}_criteria.json")), &criteria)?;
    write_text(&dir.join(format!("class_{class}_curves.csv")), &curves_csv(&curves))?;
    Ok(ClassEvaluation {
        class_id: class,
        images: items.len(),
        full_accuracy: full,
        criteria,
        curves,
    })
}

pub fn curves_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("mode,top_k,accuracy,instances\n");
    for p in curves {
        writeln!(out, "{},{},{},{}", p.mode.name(), p.top_k, p.accuracy, p.instances).unwrap();
    }
    out
}

/// Averages per-class curves point by point.
pub fn average_curves(per_class: &[&[CurvePoint]]) -> Vec<CurvePoint> {
    let mut acc: BTreeMap<(CurveMode, usize), (f64, usize, usize)> = BTreeMap::new();
    for curves in per_class {
        for p in *curves {
            let e = acc.entry((p.mode, p.top_k)).or_default();
            e.0 += p.accuracy;
            e.1 += 1;
            e.2 += p.instances;
        }
    }
    acc.into_iter()
        .map(|((mode, top_k), (sum, n, instances))| CurvePoint {
            top_k,
            accuracy: sum / n as f64,
            mode,
            instances,
        })
        .collect()
}

/// Concept scores, top-k criteria and add/remove curves for every selected class.
pub fn cmd_evaluate(ctx: &Context) -> Result<EvaluationReport> {
    let classes = ctx
        .data
        .classes(&ctx.cfg)
        .into_iter()
        .map(|c| evaluate_class(ctx, c))
        .collect::<Result<Vec<_>>>()?;
    let curves = average_curves(&classes.iter().map(|c| c.curves.as_slice()).collect::<Vec<_>>());
    let undefined_metrics = classes
        .iter()
        .flat_map(|c| c.criteria.undefined.iter().map(move |u| format!("class {}: {u}", c.class_id)))
        .collect();
    let full_accuracy = classes.iter().map(|c| c.full_accuracy).sum::<f64>() / classes.len().max(1) as f64;
    let report = EvaluationReport {
        run: ctx.cfg.run_name(),
        classes,
        curves,
        full_accuracy,
        undefined_metrics,
    };
    let dir = ctx.cfg.reports_dir();
    write_json(&dir.join("evaluation.json"), &report)?;
    write_text(&dir.join("curves.csv"), &curves_csv(&report.curves))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Which grid the row belongs to: `"k"` (M fixed to 1) or `"M"` (k fixed).
    pub grid: String,
    pub k: usize,
    #[serde(rename = "M")]
    pub draws: usize,
    /// Mean accuracy over the curve's top-k values, per mode.
    pub ssc_most: f64,
    pub sdc_most: f64,
    pub ssc_least: f64,
    pub sdc_least: f64,
    pub curves: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub ablation: Ablation,
    pub fixed_k_for_m_grid: usize,
    pub rows: Vec<SweepRow>,
}

fn mean_accuracy(curves: &[CurvePoint], mode: CurveMode) -> f64 {
    let pts: Vec<f64> = curves.iter().filter(|p| p.mode == mode).map(|p| p.accuracy).collect();
    pts.iter().sum::<f64>() / pts.len().max(1) as f64
}

fn sweep_row(ctx: &Context, grid: &str, k: usize, draws: usize) -> Result<SweepRow> {
    let mut cfg = ctx.cfg.clone();
    cfg.k = k;
    cfg.draws = draws;
    cfg.validate()?;
    let sub = Context {
        cfg,
        model: ctx.model.clone(),
        data: ctx.data.clone(),
    };
    let per_class = sub
        .data
        .classes(&sub.cfg)
        .into_iter()
        .map(|c| {
            let (report, concepts, _) = class_scores(&sub, c)?;
            Ok(class_curves(&sub, c, &report.scores, &concepts)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let curves = average_curves(&per_class.iter().map(|c| c.as_slice()).collect::<Vec<_>>());
    Ok(SweepRow {
        grid: grid.to_string(),
        k,
        draws,
        ssc_most: mean_accuracy(&curves, CurveMode::SscAdd),
        sdc_most: mean_accuracy(&curves, CurveMode::SdcRemove),
        ssc_least: mean_accuracy(&curves, CurveMode::LeastAdd),
        sdc_least: mean_accuracy(&curves, CurveMode::LeastRemove),
        curves,
    })
}

/// Add/remove curves for a grid over k (M = 1) and over M (k fixed to the
/// configured k), as in a hyperparameter sensitivity table.
pub fn cmd_sweep(ctx: &Context) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &k in &ctx.cfg.sweep_k {
        rows.push(sweep_row(ctx, "k", k, 1)?);
    }
    for &m in &ctx.cfg.sweep_draws {
        rows.push(sweep_row(ctx, "M", ctx.cfg.k, m)?);
    }
    let report = SweepReport {
        seed: ctx.cfg.seed,
        ablation: ctx.cfg.ablation,
        fixed_k_for_m_grid: ctx.cfg.k,
        rows,
    };
    let dir = ctx.cfg.output.join("reports");
    write_json(&dir.join("sweep.json"), &report)?;
    let mut csv = String::from("grid,k,M,ssc_most,sdc_most,ssc_least,sdc_least\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.grid, r.k, r.draws, r.ssc_most, r.sdc_most, r.ssc_least, r.sdc_least
        )
        .unwrap();
    }
    write_text(&dir.join("sweep.csv"), &csv)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub images: usize,
    pub configs: Vec<PathBuf>,
}

/// Writes the toy blob dataset under `dir` with two ready-to-run configs:
/// `config.json` (tiny MLP) and `config_linear.json` (linear color model).
pub fn cmd_generate(dir: &Path, toy: &ToyConfig) -> Result<GenerateSummary> {
    let images = write_dataset(dir, toy)?;
    let mut configs = Vec::new();
    for (name, kind, weights, output) in [
        ("config.json", ModelKind::TinyMlp, "models/tiny_mlp.json", "out"),
        ("config_linear.json", ModelKind::LinearColor, "models/linear_color.json", "out_linear"),
    ] {
        let mut cfg = RunConfig::new(ModelSpec::from_weights(kind, weights));
        cfg.seed = toy.seed;
        cfg.labels = Some(PathBuf::from("labels.csv"));
        cfg.output = PathBuf::from(output);
        let path = dir.join(name);
        write_json(&path, &cfg)?;
        configs.push(path);
    }
    Ok(GenerateSummary {
        images: images.len(),
        configs,
    })
}
