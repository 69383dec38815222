//! SLIC superpixels in CIELAB with grid seeding and connectivity enforcement.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

use super::LabelMap;

#[derive(Clone, Copy, Debug, Default)]
struct Lab {
    l: f64,
    a: f64,
    b: f64,
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIELAB.
fn rgb_to_lab([r, g, b]: [u8; 3]) -> Lab {
    let (r, g, b) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / 0.95047), lab_f(y), lab_f(z / 1.08883));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

fn color_dist2(p: Lab, q: Lab) -> f64 {
    (p.l - q.l).powi(2) + (p.a - q.a).powi(2) + (p.b - q.b).powi(2)
}

#[derive(Clone, Copy, Debug)]
struct Center {
    color: Lab,
    y: f64,
    x: f64,
}

/// Seed grid dimensions `(rows, cols)` whose product approximates `n`.
pub(crate) fn seed_grid(height: usize, width: usize, n: usize) -> (usize, usize) {
    let rows = ((n as f64 * height as f64 / width as f64).sqrt().round() as usize).max(1);
    let cols = ((n as f64 / rows as f64).round() as usize).max(1);
    (rows, cols)
}

/// SLIC segmentation into roughly `n_segments` superpixels.
///
/// Deterministic: centers start on a regular grid, nudged to the lowest color
/// gradient in their 3x3 neighborhood. After the iterations, 4-connected
/// fragments smaller than a quarter of the average superpixel are merged into
/// their largest adjacent fragment, and labels are renumbered in raster order.
pub fn slic(image: &ImageTensor, n_segments: usize, compactness: f64, iterations: usize) -> Result<LabelMap> {
    if n_segments < 2 {
        return Err(Error::domain(format!("n_segments must be >= 2, got {n_segments}")));
    }
    if iterations == 0 {
        return Err(Error::domain("iterations must be >= 1"));
    }
    if !(compactness.is_finite() && compactness > 0.0) {
        return Err(Error::domain(format!("compactness must be positive, got {compactness}")));
    }
    let (h, w) = (image.height(), image.width());
    let (rows, cols) = seed_grid(h, w, n_segments);
    if rows > h || cols > w {
        return Err(Error::domain(format!(
            "{h}x{w} image is smaller than the {rows}x{cols} seed grid for {n_segments} segments"
        )));
    }

    let lab: Vec<Lab> = image.pixels().map(rgb_to_lab).collect();
    let step_y = h as f64 / rows as f64;
    let step_x = w as f64 / cols as f64;
    let k = rows * cols;
    let s = ((h * w) as f64 / k as f64).sqrt();
    let window = step_y.max(step_x).ceil() as isize;
    let spatial_weight = (compactness / s).powi(2);

    let gradient = |y: usize, x: usize| -> f64 {
        let at = |yy: usize, xx: usize| lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        color_dist2(at(y, xr), at(y, xl)) + color_dist2(at(yd, x), at(yu, x))
    };

    let mut centers = Vec::with_capacity(k);
    for r in 0..rows {
        for c in 0..cols {
            let cy = (((r as f64 + 0.5) * step_y) as usize).min(h - 1);
            let cx = (((c as f64 + 0.5) * step_x) as usize).min(w - 1);
            let (mut by, mut bx, mut bg) = (cy, cx, gradient(cy, cx));
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(yy, xx);
                    if g < bg {
                        (by, bx, bg) = (yy, xx, g);
                    }
                }
            }
            centers.push(Center {
                color: lab[by * w + bx],
                y: by as f64,
                x: bx as f64,
            });
        }
    }

    // Initial labels: the grid cell each pixel falls in.
    let mut labels: Vec<u32> = (0..h * w)
        .map(|p| {
            let r = (((p / w) as f64 / step_y) as usize).min(rows - 1);
            let c = (((p % w) as f64 / step_x) as usize).min(cols - 1);
            (r * cols + c) as u32
        })
        .collect();

    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..iterations {
        dist.fill(f64::INFINITY);
        for (ci, center) in centers.iter().enumerate() {
            let (cy, cx) = (center.y.round() as isize, center.x.round() as isize);
            let y0 = (cy - window).max(0) as usize;
            let y1 = ((cy + window) as usize).min(h - 1);
            let x0 = (cx - window).max(0) as usize;
            let x1 = ((cx + window) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let ds2 = (y as f64 - center.y).powi(2) + (x as f64 - center.x).powi(2);
                    let d = color_dist2(lab[p], center.color) + ds2 * spatial_weight;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }

        let mut acc = vec![(Lab::default(), 0.0, 0.0, 0usize); k];
        for (p, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            a.0.l += lab[p].l;
            a.0.a += lab[p].a;
            a.0.b += lab[p].b;
            a.1 += (p / w) as f64;
            a.2 += (p % w) as f64;
            a.3 += 1;
        }
        for (center, (sum, sy, sx, count)) in centers.iter_mut().zip(acc) {
            if count > 0 {
                let n = count as f64;
                center.color = Lab {
                    l: sum.l / n,
                    a: sum.a / n,
                    b: sum.b / n,
                };
                center.y = sy / n;
                center.x = sx / n;
            }
        }
    }

    let min_size = ((h * w) as f64 / k as f64 * 0.25).floor().max(1.0) as usize;
    let labels = enforce_connectivity(&labels, h, w, min_size);
    LabelMap::new(h, w, labels)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Splits labels into 4-connected components, merges components smaller than
/// `min_size` into their largest adjacent component, and renumbers densely in
/// raster order of each segment's first pixel.
pub(crate) fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }

    let count = sizes.len();
    let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); count];
    for p in 0..n {
        let (y, x) = (p / w, p % w);
        if x + 1 < w && comp[p] != comp[p + 1] {
            adjacent[comp[p]].insert(comp[p + 1]);
            adjacent[comp[p + 1]].insert(comp[p]);
        }
        if y + 1 < h && comp[p] != comp[p + w] {
            adjacent[comp[p]].insert(comp[p + w]);
            adjacent[comp[p + w]].insert(comp[p]);
        }
    }

    let mut parent: Vec<usize> = (0..count).collect();
    for c in 0..count {
        let root = find(&mut parent, c);
        if sizes[root] >= min_size {
            continue;
        }
        let mut best: Option<usize> = None;
        let neighbors: Vec<usize> = adjacent[root].iter().copied().collect();
        for nb in neighbors {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            best = match best {
                Some(b) if sizes[b] >= sizes[r] => Some(b),
                _ => Some(r),
            };
        }
        if let Some(target) = best {
            parent[root] = target;
            sizes[target] += sizes[root];
            let moved = std::mem::take(&mut adjacent[root]);
            adjacent[target].extend(moved);
        }
    }

    let mut dense = vec![u32::MAX; count];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for p in 0..n {
        let r = find(&mut parent, comp[p]);
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        out[p] = dense[r];
    }
    out
}
