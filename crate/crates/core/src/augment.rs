//! Geometric augmentations used to build BootGenerator training triplets.
//!
//! Every transform is applied through one backward-sampling field so that an
//! image and its edge map always receive the identical geometry.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, ImageTensor, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    None,
    TopBottom,
    LeftRight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Control points per side of the local TPS grid.
    pub tps_grid: usize,
    /// Side of the warped patch as a fraction of the image side.
    pub tps_patch_fraction: f32,
    /// Maximum control point offset as a fraction of the patch side.
    pub tps_max_shift: f32,
    pub rtp_scale_range: (f32, f32),
    /// Translation range as a fraction of the image side.
    pub rtp_translate_range: (f32, f32),
    pub pad_value: f32,
    pub flip_modes: Vec<FlipMode>,
    /// Probability that each augmentation in a chain is applied.
    pub apply_prob: f64,
    /// Local TPS is only part of the chain when set (BootGenerator training).
    pub use_local_tps: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            tps_grid: 3,
            tps_patch_fraction: 0.5,
            tps_max_shift: 0.1,
            rtp_scale_range: (0.6, 1.0),
            rtp_translate_range: (-0.15, 0.15),
            pad_value: 0.0,
            flip_modes: vec![FlipMode::None, FlipMode::TopBottom, FlipMode::LeftRight],
            apply_prob: 0.5,
            use_local_tps: true,
        }
    }
}

impl AugmentParams {
    /// Parameters under which every chain is the identity.
    pub fn identity() -> Self {
        AugmentParams {
            apply_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tps_grid < 2 {
            return Err(Error::Param(format!(
                "tps_grid must be >= 2, got {}",
                self.tps_grid
            )));
        }
        if !(0.0..=0.5).contains(&self.tps_max_shift) {
            return Err(Error::Param(format!(
                "tps_max_shift must lie in [0, 0.5], got {}",
                self.tps_max_shift
            )));
        }
        if !(self.tps_patch_fraction > 0.0 && self.tps_patch_fraction <= 1.0) {
            return Err(Error::Param(format!(
                "tps patch fraction {} does not fit inside the image",
                self.tps_patch_fraction
            )));
        }
        let (lo, hi) = self.rtp_scale_range;
        if lo <= 0.0 || hi < lo {
            return Err(Error::Param(format!("bad rtp scale range ({lo}, {hi})")));
        }
        if self.rtp_translate_range.1 < self.rtp_translate_range.0 {
            return Err(Error::Param("rtp translate range is reversed".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Param("apply_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn check_aligned(image: &ImageTensor, edge: &EdgeMap) -> Result<()> {
    if image.dims() != edge.dims() {
        return Err(Error::Contract(format!(
            "image {:?} and edge {:?} are not aligned",
            image.dims(),
            edge.dims()
        )));
    }
    Ok(())
}

/// Thin-plate spline mapping output coordinates to source coordinates.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<(f64, f64)>,
    weights: Vec<(f64, f64)>,
    affine: [(f64, f64); 3],
    scale: f64,
}

fn tps_kernel(r2: f64) -> f64 {
    // r^2 log r = 0.5 r^2 log r^2
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Fits an interpolating spline with `f(points[i]) = values[i]` per axis.
    /// Coordinates are divided by `scale` for conditioning.
    pub fn fit(points: &[(f64, f64)], values: &[(f64, f64)], scale: f64) -> Result<Self> {
        let n = points.len();
        assert_eq!(n, values.len());
        let pts: Vec<(f64, f64)> = points
            .iter()
            .map(|&(y, x)| (y / scale, x / scale))
            .collect();
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dy = pts[i].0 - pts[j].0;
                let dx = pts[i].1 - pts[j].1;
                a[(i, j)] = tps_kernel(dy * dy + dx * dx);
            }
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = pts[i].0;
            a[(i, n + 2)] = pts[i].1;
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = pts[i].0;
            a[(n + 2, i)] = pts[i].1;
        }
        let mut rhs = DMatrix::<f64>::zeros(m, 2);
        for (i, &(vy, vx)) in values.iter().enumerate() {
            rhs[(i, 0)] = vy / scale;
            rhs[(i, 1)] = vx / scale;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Param("degenerate TPS control points".into()))?;
        let col = |c: usize| DVector::from_iterator(m, (0..m).map(|r| sol[(r, c)]));
        let (sy, sx) = (col(0), col(1));
        Ok(ThinPlateSpline {
            centers: pts,
            weights: (0..n).map(|i| (sy[i], sx[i])).collect(),
            affine: [
                (sy[n], sx[n]),
                (sy[n + 1], sx[n + 1]),
                (sy[n + 2], sx[n + 2]),
            ],
            scale,
        })
    }

    pub fn eval(&self, y: f64, x: f64) -> (f64, f64) {
        let (py, px) = (y / self.scale, x / self.scale);
        let mut vy = self.affine[0].0 + self.affine[1].0 * py + self.affine[2].0 * px;
        let mut vx = self.affine[0].1 + self.affine[1].1 * py + self.affine[2].1 * px;
        for (&(cy, cx), &(wy, wx)) in self.centers.iter().zip(&self.weights) {
            let k = tps_kernel((py - cy).powi(2) + (px - cx).powi(2));
            vy += wy * k;
            vx += wx * k;
        }
        (vy * self.scale, vx * self.scale)
    }
}

/// A sampled local TPS warp: a square patch and its backward displacement field.
#[derive(Clone, Debug)]
pub struct LocalTps {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    spline: Option<ThinPlateSpline>,
}

impl LocalTps {
    pub fn sample(
        height: usize,
        width: usize,
        params: &AugmentParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        params.validate()?;
        let side = (params.tps_patch_fraction * height.min(width) as f32).round() as usize;
        if side > height || side > width {
            return Err(Error::Param(format!(
                "tps patch side {side} exceeds image {height}x{width}"
            )));
        }
        let side = side.max(2);
        let top = rng.random_range(0..=height - side);
        let left = rng.random_range(0..=width - side);
        let g = params.tps_grid;
        let max_off = (params.tps_max_shift * side as f32) as f64;
        let s = (side - 1) as f64;

        // Moving grid sits strictly inside the patch; fixed anchors on the
        // patch border keep the warp local.
        let mut targets = Vec::new();
        let mut values = Vec::new();
        let mut any_shift = false;
        for i in 0..g {
            for j in 0..g {
                let cy = s * (i + 1) as f64 / (g + 1) as f64;
                let cx = s * (j + 1) as f64 / (g + 1) as f64;
                let (dy, dx) = if max_off > 0.0 {
                    (
                        rng.random_range(-max_off..=max_off),
                        rng.random_range(-max_off..=max_off),
                    )
                } else {
                    (0.0, 0.0)
                };
                any_shift |= dy != 0.0 || dx != 0.0;
                // content at (cy, cx) moves to (cy+dy, cx+dx): backward map
                // sends the destination to the source.
                targets.push((cy + dy, cx + dx));
                values.push((-dy, -dx));
            }
        }
        for k in 0..=g + 1 {
            let t = s * k as f64 / (g + 1) as f64;
            for p in [(0.0, t), (s, t), (t, 0.0), (t, s)] {
                if !targets
                    .iter()
                    .any(|&q: &(f64, f64)| (q.0 - p.0).abs() < 1e-9 && (q.1 - p.1).abs() < 1e-9)
                {
                    targets.push(p);
                    values.push((0.0, 0.0));
                }
            }
        }
        let spline = if any_shift {
            Some(ThinPlateSpline::fit(&targets, &values, s.max(1.0))?)
        } else {
            None
        };
        Ok(LocalTps {
            top,
            left,
            side,
            spline,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.spline.is_none()
    }

    fn warp_raster(&self, r: &Raster) -> Raster {
        let Some(spline) = &self.spline else {
            return r.clone();
        };
        let mut out = r.clone();
        let bottom = (self.top + self.side).min(r.height());
        let right = (self.left + self.side).min(r.width());
        for y in self.top..bottom {
            for x in self.left..right {
                let ly = (y - self.top) as f64;
                let lx = (x - self.left) as f64;
                let (dy, dx) = spline.eval(ly, lx);
                let sy = (y as f64 + dy) as f32;
                let sx = (x as f64 + dx) as f32;
                for c in 0..r.channels() {
                    out.set(y, x, c, r.sample_clamped(sy, sx, c));
                }
            }
        }
        out
    }
}

/// Applies a local thin-plate-spline warp to a square patch of both inputs.
pub fn local_tps_warp(
    image: &ImageTensor,
    edge: &EdgeMap,
    params: &AugmentParams,
    seed: u64,
) -> Result<(ImageTensor, EdgeMap)> {
    check_aligned(image, edge)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = image.dims();
    let tps = LocalTps::sample(h, w, params, &mut rng)?;
    Ok(apply_tps(&tps, image, edge))
}

fn apply_tps(tps: &LocalTps, image: &ImageTensor, edge: &EdgeMap) -> (ImageTensor, EdgeMap) {
    (
        ImageTensor::from_raster(tps.warp_raster(image.raster())).expect("3 channels"),
        EdgeMap::from_raster(tps.warp_raster(edge.raster())).expect("1 channel"),
    )
}

/// Scale about the image center followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResizeTranslate {
    pub scale: f32,
    /// Translation in pixels (rows, cols).
    pub shift: (f32, f32),
}

impl ResizeTranslate {
    pub fn new(scale: f32, shift: (f32, f32)) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Param(format!("scale must be positive, got {scale}")));
        }
        Ok(ResizeTranslate { scale, shift })
    }

    pub fn sample(
        height: usize,
        width: usize,
        params: &AugmentParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (lo, hi) = params.rtp_scale_range;
        let scale = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let (tlo, thi) = params.rtp_translate_range;
        let mut t = || {
            if thi > tlo {
                rng.random_range(tlo..=thi)
            } else {
                tlo
            }
        };
        let ty = t() * height as f32;
        let tx = t() * width as f32;
        ResizeTranslate::new(scale, (ty, tx))
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.shift == (0.0, 0.0)
    }

    fn warp_raster(&self, r: &Raster, pad: f32) -> Raster {
        if self.is_identity() {
            return r.clone();
        }
        let cy = (r.height() as f32 - 1.0) * 0.5;
        let cx = (r.width() as f32 - 1.0) * 0.5;
        Raster::from_fn(r.height(), r.width(), r.channels(), |y, x, c| {
            let sy = (y as f32 - cy - self.shift.0) / self.scale + cy;
            let sx = (x as f32 - cx - self.shift.1) / self.scale + cx;
            r.sample_padded(sy, sx, c, pad)
        })
    }
}

/// Resizes, translates and pads both inputs to their original resolution.
pub fn resize_translate_pad(
    image: &ImageTensor,
    edge: &EdgeMap,
    params: &AugmentParams,
    seed: u64,
) -> Result<(ImageTensor, EdgeMap)> {
    check_aligned(image, edge)?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = image.dims();
    let rt = ResizeTranslate::sample(h, w, params, &mut rng)?;
    Ok(apply_rtp(&rt, image, edge, params.pad_value))
}

/// As [`resize_translate_pad`] with an explicit transform.
pub fn resize_translate_pad_with(
    image: &ImageTensor,
    edge: &EdgeMap,
    rt: ResizeTranslate,
    pad_value: f32,
) -> Result<(ImageTensor, EdgeMap)> {
    check_aligned(image, edge)?;
    Ok(apply_rtp(&rt, image, edge, pad_value))
}

fn apply_rtp(
    rt: &ResizeTranslate,
    image: &ImageTensor,
    edge: &EdgeMap,
    pad: f32,
) -> (ImageTensor, EdgeMap) {
    (
        ImageTensor::from_raster(rt.warp_raster(image.raster(), pad)).expect("3 channels"),
        EdgeMap::from_raster(rt.warp_raster(edge.raster(), 0.0)).expect("1 channel"),
    )
}

fn flip_raster(r: &Raster, mode: FlipMode) -> Raster {
    match mode {
        FlipMode::None => r.clone(),
        FlipMode::TopBottom => r.flip_top_bottom(),
        FlipMode::LeftRight => r.flip_left_right(),
    }
}

pub fn flip(image: &ImageTensor, edge: &EdgeMap, mode: FlipMode) -> (ImageTensor, EdgeMap) {
    (
        ImageTensor::from_raster(flip_raster(image.raster(), mode)).expect("3 channels"),
        EdgeMap::from_raster(flip_raster(edge.raster(), mode)).expect("1 channel"),
    )
}

/// One sampled augmentation chain: TPS, then resize-translate-pad, then flip.
#[derive(Clone, Debug)]
pub struct AugmentChain {
    pub tps: Option<LocalTps>,
    pub rtp: Option<ResizeTranslate>,
    pub flip: FlipMode,
    pad_value: f32,
}

impl AugmentChain {
    pub fn sample(height: usize, width: usize, params: &AugmentParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coin = |rng: &mut ChaCha8Rng| rng.random_bool(params.apply_prob);
        let tps = if params.use_local_tps && coin(&mut rng) {
            Some(LocalTps::sample(height, width, params, &mut rng)?)
        } else {
            None
        };
        let rtp = if coin(&mut rng) {
            Some(ResizeTranslate::sample(height, width, params, &mut rng)?)
        } else {
            None
        };
        let flip = if !params.flip_modes.is_empty() && coin(&mut rng) {
            params.flip_modes[rng.random_range(0..params.flip_modes.len())]
        } else {
            FlipMode::None
        };
        Ok(AugmentChain {
            tps,
            rtp,
            flip,
            pad_value: params.pad_value,
        })
    }

    pub fn identity() -> Self {
        AugmentChain {
            tps: None,
            rtp: None,
            flip: FlipMode::None,
            pad_value: 0.0,
        }
    }

    pub fn apply(&self, image: &ImageTensor, edge: &EdgeMap) -> Result<(ImageTensor, EdgeMap)> {
        check_aligned(image, edge)?;
        let (mut img, mut e) = (image.clone(), edge.clone());
        if let Some(tps) = &self.tps {
            (img, e) = apply_tps(tps, &img, &e);
        }
        if let Some(rt) = &self.rtp {
            (img, e) = apply_rtp(rt, &img, &e, self.pad_value);
        }
        Ok(flip(&img, &e, self.flip))
    }
}

/// Target edge, reference image and target image for BootGenerator.
#[derive(Clone, Debug, PartialEq)]
pub struct BootTriplet {
    pub target_edge: EdgeMap,
    pub reference: ImageTensor,
    pub target: ImageTensor,
}

/// Draws two independent chains A and B: the target pair is A(edge), A(image)
/// and the reference is B(image).
pub fn build_boot_triplet(
    edge: &EdgeMap,
    image: &ImageTensor,
    params: &AugmentParams,
    seed: u64,
) -> Result<BootTriplet> {
    check_aligned(image, edge)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (seed_a, seed_b) = (rng.next_u64(), rng.next_u64());
    let (h, w) = image.dims();
    let a = AugmentChain::sample(h, w, params, seed_a)?;
    let b = AugmentChain::sample(h, w, params, seed_b)?;
    let (target, target_edge) = a.apply(image, edge)?;
    let (reference, _) = b.apply(image, edge)?;
    Ok(BootTriplet {
        target_edge,
        reference,
        target,
    })
}
