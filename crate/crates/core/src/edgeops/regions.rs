use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageTensor, RegionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    Semantic,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRegionMap {
    pub regions: Vec<RegionMask>,
    pub source: RegionSource,
}

impl CandidateRegionMap {
    pub fn new(regions: Vec<RegionMask>, source: RegionSource) -> Self {
        CandidateRegionMap { regions, source }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Every area in (0, 1) and no two regions identical.
    pub fn is_well_formed(&self) -> bool {
        let areas_ok = self
            .regions
            .iter()
            .all(|r| (0.0..1.0).contains(&r.area_fraction()) && !r.is_empty());
        let distinct = self
            .regions
            .iter()
            .enumerate()
            .all(|(i, a)| self.regions[i + 1..].iter().all(|b| a != b));
        areas_ok && distinct
    }
}

/// Color-quantized connected components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionProposerConfig {
    pub clusters: usize,
    pub kmeans_iterations: usize,
    /// Components smaller than this many pixels are dropped.
    pub min_pixels: usize,
    pub seed: u64,
}

impl Default for RegionProposerConfig {
    fn default() -> Self {
        RegionProposerConfig {
            clusters: 4,
            kmeans_iterations: 12,
            min_pixels: 4,
            seed: 0,
        }
    }
}

fn kmeans_labels(image: &ImageTensor, k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let data = image.data();
    let n = data.len() / 3;
    let px = |i: usize| [data[3 * i], data[3 * i + 1], data[3 * i + 2]];
    let d2 = |a: [f32; 3], b: [f32; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let k = k.max(1).min(n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers = vec![px(rng.random_range(0..n))];
    let mut dist: Vec<f32> = (0..n).map(|i| d2(px(i), centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().map(|&d| d as f64).sum();
        if total <= 0.0 {
            break;
        }
        let mut t = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in dist.iter().enumerate() {
            t -= d as f64;
            if t <= 0.0 {
                pick = i;
                break;
            }
        }
        let c = px(pick);
        centers.push(c);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(d2(px(i), c));
        }
    }

    let assign = |centers: &[[f32; 3]]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let p = px(i);
                let mut best = 0;
                let mut best_d = f32::INFINITY;
                for (j, &c) in centers.iter().enumerate() {
                    let d = d2(p, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..iters {
        let mut sums = vec![[0f64; 4]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let p = px(i);
            sums[l][0] += p[0] as f64;
            sums[l][1] += p[1] as f64;
            sums[l][2] += p[2] as f64;
            sums[l][3] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                *c = [
                    (s[0] / s[3]) as f32,
                    (s[1] / s[3]) as f32,
                    (s[2] / s[3]) as f32,
                ];
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// 4-connected components of equal labels, in raster-scan order of first pixel.
pub fn connected_components(labels: &[usize], height: usize, width: usize) -> Vec<RegionMask> {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut mask = RegionMask::empty(height, width);
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / width, i % width);
            mask.set(y, x, true);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[i] {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
        out.push(mask);
    }
    out
}

/// Rough semantic regions from k-means color clusters split into components.
pub fn propose_regions(image: &ImageTensor, config: &RegionProposerConfig) -> CandidateRegionMap {
    let (h, w) = image.dims();
    if h == 0 || w == 0 {
        return CandidateRegionMap::new(Vec::new(), RegionSource::Semantic);
    }
    let labels = kmeans_labels(
        image,
        config.clusters,
        config.kmeans_iterations,
        config.seed,
    );
    let regions = connected_components(&labels, h, w)
        .into_iter()
        .filter(|m| m.count() >= config.min_pixels.max(1) && m.area_fraction() < 1.0)
        .collect();
    CandidateRegionMap::new(regions, RegionSource::Semantic)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    pub min_area: f64,
    pub overlap_merge_iou: f64,
    pub background_border_fraction: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            min_area: 0.005,
            overlap_merge_iou: 0.5,
            background_border_fraction: 0.5,
        }
    }
}

/// Fraction of a region's boundary pixels lying on the image border.
fn border_perimeter_fraction(m: &RegionMask) -> f64 {
    let (h, w) = m.dims();
    let mut perimeter = 0usize;
    let mut on_border = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !m.contains(y, x) {
                continue;
            }
            let at_border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            let interior_edge = (y > 0 && !m.contains(y - 1, x))
                || (y + 1 < h && !m.contains(y + 1, x))
                || (x > 0 && !m.contains(y, x - 1))
                || (x + 1 < w && !m.contains(y, x + 1));
            if at_border || interior_edge {
                perimeter += 1;
                if at_border {
                    on_border += 1;
                }
            }
        }
    }
    if perimeter == 0 {
        0.0
    } else {
        on_border as f64 / perimeter as f64
    }
}

/// Removes background-like regions, groups small regions into their nearest
/// neighbor by centroid, merges overlapping pairs, and repeats to a fixed point.
pub fn refine_regions(
    candidates: &CandidateRegionMap,
    min_area: f64,
    overlap_merge_iou: f64,
    background_border_fraction: f64,
) -> Result<CandidateRegionMap> {
    for (name, v) in [
        ("min_area", min_area),
        ("overlap_merge_iou", overlap_merge_iou),
        ("background_border_fraction", background_border_fraction),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Param(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let mut regions: Vec<RegionMask> = candidates
        .regions
        .iter()
        .filter(|r| !r.is_empty())
        .cloned()
        .collect();
    loop {
        let before = regions.clone();

        regions.retain(|r| border_perimeter_fraction(r) <= background_border_fraction);

        let (small, large): (Vec<_>, Vec<_>) = regions
            .iter()
            .cloned()
            .partition(|r| r.area_fraction() < min_area);
        if !small.is_empty() && !large.is_empty() {
            let mut grouped = large;
            let centroids: Vec<(f64, f64)> = grouped
                .iter()
                .map(|r| r.centroid().expect("nonempty"))
                .collect();
            for s in &small {
                let (sy, sx) = s.centroid().expect("nonempty");
                let nearest = centroids
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (a.1 .0 - sy).powi(2) + (a.1 .1 - sx).powi(2);
                        let db = (b.1 .0 - sy).powi(2) + (b.1 .1 - sx).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| i)
                    .expect("large is nonempty");
                grouped[nearest] = grouped[nearest].union(s);
            }
            regions = grouped;
        }

        'merge: loop {
            for i in 0..regions.len() {
                for j in i + 1..regions.len() {
                    if regions[i].iou(&regions[j]) > overlap_merge_iou {
                        let merged = regions[i].union(&regions[j]);
                        regions[i] = merged;
                        regions.remove(j);
                        continue 'merge;
                    }
                }
            }
            break;
        }

        if regions == before {
            break;
        }
    }
    regions.retain(|r| r.area_fraction() < 1.0);
    Ok(CandidateRegionMap::new(regions, candidates.source))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StochasticShapeParams {
    pub kinds: Vec<ShapeKind>,
    /// Primitive size as a fraction of the image side.
    pub scale_range: (f64, f64),
    /// Height / width ratio range.
    pub aspect_range: (f64, f64),
    pub rotate: bool,
    pub area_band: (f64, f64),
    pub max_retries: usize,
}

impl Default for StochasticShapeParams {
    fn default() -> Self {
        StochasticShapeParams {
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            scale_range: (0.12, 0.45),
            aspect_range: (0.33, 3.0),
            rotate: true,
            area_band: (0.01, 0.4),
            max_retries: 32,
        }
    }
}

/// One rasterized primitive of a stochastic region.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Full extent (height, width) before rotation.
    pub extent: (f64, f64),
    pub angle: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let v = c * dy - s * dx;
        let u = s * dy + c * dx;
        let (hy, hx) = (self.extent.0 / 2.0, self.extent.1 / 2.0);
        match self.kind {
            ShapeKind::Rectangle => v.abs() <= hy && u.abs() <= hx,
            ShapeKind::Ellipse => (v / hy).powi(2) + (u / hx).powi(2) <= 1.0,
        }
    }

    fn rasterize(&self, mask: &mut RegionMask) {
        let (h, w) = mask.dims();
        if self.angle == 0.0 && self.kind == ShapeKind::Rectangle {
            // Integer-aligned rectangle: exact pixel area.
            let y0 = (self.center.0 - self.extent.0 / 2.0).round().max(0.0) as usize;
            let x0 = (self.center.1 - self.extent.1 / 2.0).round().max(0.0) as usize;
            let y1 = (y0 + self.extent.0 as usize).min(h);
            let x1 = (x0 + self.extent.1 as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    mask.set(y, x, true);
                }
            }
            return;
        }
        for y in 0..h {
            for x in 0..w {
                if self.contains(y as f64, x as f64) {
                    mask.set(y, x, true);
                }
            }
        }
    }
}

fn sample_shape(h: usize, w: usize, params: &StochasticShapeParams, rng: &mut ChaCha8Rng) -> Shape {
    let kind = params.kinds[rng.random_range(0..params.kinds.len())];
    let (slo, shi) = params.scale_range;
    let scale = if shi > slo {
        rng.random_range(slo..=shi)
    } else {
        slo
    };
    let (alo, ahi) = params.aspect_range;
    let aspect = if ahi > alo {
        (rng.random_range(alo.ln()..=ahi.ln())).exp()
    } else {
        alo
    };
    let side = h.min(w) as f64;
    let eh = (scale * side * aspect.sqrt()).round().clamp(1.0, h as f64);
    let ew = (scale * side / aspect.sqrt()).round().clamp(1.0, w as f64);
    let angle =
        if params.rotate && kind != ShapeKind::Rectangle || params.rotate && rng.random_bool(0.5) {
            rng.random_range(0.0..std::f64::consts::PI)
        } else {
            0.0
        };
    // Axis-aligned rectangles sit on integer corners fully inside the image.
    let (cy, cx) = if angle == 0.0 && kind == ShapeKind::Rectangle {
        let top = rng.random_range(0..=(h - eh as usize)) as f64;
        let left = rng.random_range(0..=(w - ew as usize)) as f64;
        (top + eh / 2.0, left + ew / 2.0)
    } else {
        (
            rng.random_range(eh / 2.0..=(h as f64 - eh / 2.0).max(eh / 2.0)),
            rng.random_range(ew / 2.0..=(w as f64 - ew / 2.0).max(ew / 2.0)),
        )
    };
    Shape {
        kind,
        center: (cy, cx),
        extent: (eh, ew),
        angle,
    }
}

/// Stochastic region plus the primitives it was built from.
pub fn stochastic_region_with_shapes(
    height: usize,
    width: usize,
    count_range: (usize, usize),
    params: &StochasticShapeParams,
    seed: u64,
) -> Result<(RegionMask, Vec<Shape>)> {
    let (cmin, cmax) = count_range;
    if cmin < 1 || cmax < cmin {
        return Err(Error::Param(format!("bad count range ({cmin}, {cmax})")));
    }
    if params.kinds.is_empty() {
        return Err(Error::Param("no primitive kinds configured".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Param("empty canvas".into()));
    }
    let (lo, hi) = params.area_band;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.max_retries.max(1) {
        let count = rng.random_range(cmin..=cmax);
        let shapes: Vec<Shape> = (0..count)
            .map(|_| sample_shape(height, width, params, &mut rng))
            .collect();
        let mut mask = RegionMask::empty(height, width);
        for s in &shapes {
            s.rasterize(&mut mask);
        }
        let a = mask.area_fraction();
        if a >= lo && a <= hi {
            return Ok((mask, shapes));
        }
    }
    warn!(
        "stochastic region missed area band ({lo}, {hi}) for seed {seed}; using centered fallback"
    );
    let target = 0.5 * (lo + hi) * (height * width) as f64;
    let side = target.sqrt();
    let eh = side.round().clamp(1.0, height as f64);
    let ew = (target / eh).round().clamp(1.0, width as f64);
    let shape = Shape {
        kind: ShapeKind::Rectangle,
        center: (
            ((height as f64 - eh) / 2.0).floor() + eh / 2.0,
            ((width as f64 - ew) / 2.0).floor() + ew / 2.0,
        ),
        extent: (eh, ew),
        angle: 0.0,
    };
    let mut mask = RegionMask::empty(height, width);
    shape.rasterize(&mut mask);
    Ok((mask, vec![shape]))
}

/// Union of a seeded number of random rectangles and ellipses.
pub fn select_stochastic_region(
    height: usize,
    width: usize,
    count_range: (usize, usize),
    params: &StochasticShapeParams,
    seed: u64,
) -> Result<RegionMask> {
    stochastic_region_with_shapes(height, width, count_range, params, seed).map(|(m, _)| m)
}

/// Union of a seeded sample of candidate regions.
pub fn select_semantic_region(
    candidates: &CandidateRegionMap,
    count_range: (usize, usize),
    seed: u64,
) -> Result<RegionMask> {
    let n = candidates.regions.len();
    if n == 0 {
        return Err(Error::Selection("no candidate regions".into()));
    }
    let (cmin, cmax) = count_range;
    let lo = cmin.max(1).min(n);
    let hi = cmax.max(lo).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(lo..=hi);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let first = candidates.regions[picked[0]].clone();
    Ok(picked[1..]
        .iter()
        .fold(first, |acc, &i| acc.union(&candidates.regions[i])))
}
