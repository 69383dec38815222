//! Multi-resolution superpixel segmentation and physical adjacency.

mod slic;

use std::fmt;
use std::path::Path;

use image::{ImageBuffer, Luma};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, NeighborGraph};
use crate::tensor::ImageTensor;

pub use slic::slic;

/// One of the three segmentation granularities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Large,
    Medium,
    Small,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Large, Granularity::Medium, Granularity::Small];

    /// Default target segment count.
    pub fn default_target(self) -> usize {
        match self {
            Granularity::Large => 15,
            Granularity::Medium => 50,
            Granularity::Small => 80,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Large => "large",
            Granularity::Medium => "medium",
            Granularity::Small => "small",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pixel connectivity used for adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

/// Per-pixel segment ids, dense in `[0, segment_count)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    segment_count: usize,
}

impl LabelMap {
    /// Validates that every label in `[0, max]` occurs at least once.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::domain(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let count = *labels.iter().max().unwrap() as usize + 1;
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::domain(format!("label map skips segment id {missing}")));
        }
        Ok(Self {
            height,
            width,
            labels,
            segment_count: count,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Flat pixel indices of each segment.
    pub fn segment_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.segment_count];
        for (p, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(p);
        }
        out
    }

    /// True when every segment is a single 4-connected region.
    pub fn segments_connected(&self) -> bool {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut regions = vec![0usize; self.segment_count];
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let label = self.labels[start];
            regions[label as usize] += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut candidates = Vec::with_capacity(4);
                if x > 0 {
                    candidates.push(p - 1);
                }
                if x + 1 < w {
                    candidates.push(p + 1);
                }
                if y > 0 {
                    candidates.push(p - w);
                }
                if y + 1 < h {
                    candidates.push(p + w);
                }
                for q in candidates {
                    if !seen[q] && self.labels[q] == label {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        regions.iter().all(|&r| r == 1)
    }

    /// Writes the map as a single-channel 16-bit PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        if self.segment_count > u16::MAX as usize + 1 {
            return Err(Error::format("too many segments for a 16-bit label map"));
        }
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
        .expect("dimensions match");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png16(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        Self::new(
            h as usize,
            w as usize,
            luma.into_raw().into_iter().map(u32::from).collect(),
        )
    }
}

/// Pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub level: Granularity,
    pub pixel_count: usize,
    pub bounding_box: BoundingBox,
    pub mean_color: [u8; 3],
}

/// Geometry and color statistics of every segment in `map`.
pub fn segment_stats(image: &ImageTensor, map: &LabelMap, level: Granularity) -> Vec<Segment> {
    let w = map.width();
    map.segment_pixels()
        .into_iter()
        .enumerate()
        .map(|(id, pixels)| {
            let mut bb = BoundingBox {
                y0: usize::MAX,
                x0: usize::MAX,
                y1: 0,
                x1: 0,
            };
            let mut sums = [0u64; 3];
            for &p in &pixels {
                let (y, x) = (p / w, p % w);
                bb.y0 = bb.y0.min(y);
                bb.x0 = bb.x0.min(x);
                bb.y1 = bb.y1.max(y + 1);
                bb.x1 = bb.x1.max(x + 1);
                let px = image.pixel_at(p);
                for c in 0..3 {
                    sums[c] += px[c] as u64;
                }
            }
            let n = pixels.len() as u64;
            Segment {
                id,
                level,
                pixel_count: pixels.len(),
                bounding_box: bb,
                mean_color: sums.map(|s| ((s + n / 2) / n) as u8),
            }
        })
        .collect()
}

/// One granularity of a [`SegmentationSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSegmentation {
    pub level: Granularity,
    /// Segment count requested from SLIC after clamping.
    pub target: usize,
    pub map: LabelMap,
    pub segments: Vec<Segment>,
}

/// The three-granularity segmentation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSet {
    pub image_id: String,
    pub levels: Vec<LevelSegmentation>,
}

impl SegmentationSet {
    pub fn level(&self, level: Granularity) -> &LevelSegmentation {
        self.levels
            .iter()
            .find(|l| l.level == level)
            .expect("segmentation sets carry all three levels")
    }

    pub fn total_segments(&self) -> usize {
        self.levels.iter().map(|l| l.segments.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Target segment counts for large, medium and small granularity.
    pub targets: [usize; 3],
    pub compactness: f64,
    pub iterations: usize,
    pub connectivity: Connectivity,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            targets: Granularity::ALL.map(Granularity::default_target),
            compactness: 10.0,
            iterations: 10,
            connectivity: Connectivity::Four,
        }
    }
}

/// Largest target that [`multi_resolution_segment`] will pass to SLIC.
pub fn max_target(image: &ImageTensor) -> usize {
    (image.pixel_count() / 16).max(2)
}

/// Segments `image` at all three granularities. Targets above
/// `pixels / 16` are clamped with a warning.
pub fn multi_resolution_segment(
    image: &ImageTensor,
    image_id: &str,
    cfg: &SegmentationConfig,
) -> Result<SegmentationSet> {
    let cap = max_target(image);
    let levels = Granularity::ALL
        .iter()
        .zip(cfg.targets)
        .map(|(&level, requested)| {
            let target = if requested > cap {
                warn!("{image_id}: {level} target {requested} clamped to {cap} for a {}x{} image",
                    image.height(), image.width());
                cap
            } else {
                requested
            };
            let map = slic(image, target, cfg.compactness, cfg.iterations)?;
            let segments = segment_stats(image, &map, level);
            Ok(LevelSegmentation {
                level,
                target,
                map,
                segments,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationSet {
        image_id: image_id.to_string(),
        levels,
    })
}

/// Physical adjacency between segments of `map` under 4-connectivity.
pub fn adjacency(map: &LabelMap) -> NeighborGraph {
    adjacency_with(map, Connectivity::Four)
}

pub fn adjacency_with(map: &LabelMap, connectivity: Connectivity) -> NeighborGraph {
    let (h, w) = (map.height(), map.width());
    let mut g = NeighborGraph::new(map.segment_count());
    let mut link = |a: u32, b: u32| {
        if a != b {
            g.add_edge(a as usize, b as usize, EdgeKind::Physical);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let a = map.label(y, x);
            if x + 1 < w {
                link(a, map.label(y, x + 1));
            }
            if y + 1 < h {
                link(a, map.label(y + 1, x));
                if connectivity == Connectivity::Eight {
                    if x + 1 < w {
                        link(a, map.label(y + 1, x + 1));
                    }
                    if x > 0 {
                        link(a, map.label(y + 1, x - 1));
                    }
                }
            }
        }
    }
    g
}

/// Sidecar written next to each label-map PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapSidecar {
    pub image_id: String,
    pub level: Granularity,
    pub target: usize,
    pub segment_count: usize,
    pub segments: Vec<Segment>,
}

impl LevelSegmentation {
    pub fn sidecar(&self, image_id: &str) -> LabelMapSidecar {
        LabelMapSidecar {
            image_id: image_id.to_string(),
            level: self.level,
            target: self.target,
            segment_count: self.map.segment_count(),
            segments: self.segments.clone(),
        }
    }
}
