//! Training objectives: perceptual fidelity, the conditional adversarial
//! game, heatmap regression and the per-stage totals.
//!
//! Adversarial sign convention: `d_objective` is reported in maximization
//! form (`mean log D(real) + mean log(1 - D(fake))`, always <= 0) and the
//! discriminator minimizes its negation. The generator minimizes the
//! non-saturating `-mean log D(fake)`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::{convert, Conv, MultiScaleDiscriminator, Stage};
use crate::raster::{EdgeMap, Heatmap, ImageTensor, RegionMask};

/// Logits are clamped to this magnitude before any log-sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Cache directory for optional pretrained extractor weights.
pub const CACHE_ENV: &str = "ANOMALYFACTORY_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_fh: f64,
    pub w_bh: f64,
    /// One weight per extractor tap.
    pub perceptual_layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_fh: 10.0,
            w_bh: 10.0,
            perceptual_layer_weights: vec![1.0; 4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_fh) || !ok(self.w_bh) {
            return Err(Error::Config(format!(
                "heatmap weights must be finite and >= 0, got w_fh={} w_bh={}",
                self.w_fh, self.w_bh
            )));
        }
        if self.perceptual_layer_weights.is_empty()
            || !self.perceptual_layer_weights.iter().all(|&w| ok(w))
        {
            return Err(Error::Config(
                "perceptual layer weights must be non-empty, finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    PretrainedPerceptual,
    FixedRandomConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Layer indices to tap; 0 is the raw input.
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            kind: ExtractorKind::FixedRandomConv,
            taps: vec![1, 2, 3, 4],
            seed: 0x5eed,
        }
    }
}

/// Widths of the fixed random network; the first layer keeps resolution,
/// the others halve it.
const RANDOM_WIDTHS: [usize; 5] = [3, 16, 32, 64, 64];

/// Frozen convolutional feature network. Weights are plain tensors, so no
/// optimizer ever sees them.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    taps: Vec<usize>,
    layers: Vec<Conv>,
    weights: BTreeMap<String, Tensor>,
}

impl FeatureExtractor {
    pub fn from_config(cfg: &ExtractorConfig, dtype: DType, device: &Device) -> Result<Self> {
        match cfg.kind {
            ExtractorKind::FixedRandomConv => {
                Self::fixed_random(&cfg.taps, cfg.seed, dtype, device)
            }
            ExtractorKind::PretrainedPerceptual => {
                let dir = std::env::var_os(CACHE_ENV).ok_or_else(|| {
                    Error::Config(format!(
                        "pretrained extractor requested but {CACHE_ENV} is unset"
                    ))
                })?;
                let path = PathBuf::from(dir).join("perceptual.safetensors");
                Self::pretrained(&path, &cfg.taps, dtype, device)
            }
        }
    }

    /// Seeded He-normal weights, zero biases.
    pub fn fixed_random(taps: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for i in 1..RANDOM_WIDTHS.len() {
            let (cin, cout) = (RANDOM_WIDTHS[i - 1], RANDOM_WIDTHS[i]);
            let normal = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).expect("finite std");
            let vals: Vec<f64> = (0..cout * cin * 9)
                .map(|_| normal.sample(&mut rng))
                .collect();
            weights.insert(
                format!("l{i}.weight"),
                Tensor::from_vec(vals, (cout, cin, 3, 3), device)?,
            );
            weights.insert(
                format!("l{i}.bias"),
                Tensor::zeros(cout, DType::F64, device)?,
            );
        }
        Self::from_weights(ExtractorKind::FixedRandomConv, weights, taps, dtype)
    }

    /// Loads `l{i}.weight` (3x3 kernels) and `l{i}.bias` for i = 1, 2, ...
    pub fn pretrained(path: &Path, taps: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let loaded: HashMap<String, Tensor> =
            candle_core::safetensors::load_buffer(&bytes, device)?;
        Self::from_weights(
            ExtractorKind::PretrainedPerceptual,
            loaded.into_iter().collect(),
            taps,
            dtype,
        )
        .map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    fn from_weights(
        kind: ExtractorKind,
        weights: BTreeMap<String, Tensor>,
        taps: &[usize],
        dtype: DType,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut frozen = BTreeMap::new();
        let mut cin = 3;
        for i in 1.. {
            let Some(w) = weights.get(&format!("l{i}.weight")) else {
                break;
            };
            let (cout, wc, kh, kw) = w.dims4()?;
            if wc != cin || kh != 3 || kw != 3 {
                return Err(Error::Config(format!(
                    "extractor layer {i} has weight shape {:?}",
                    w.dims()
                )));
            }
            let w = w.to_dtype(dtype)?.detach();
            let b = match weights.get(&format!("l{i}.bias")) {
                Some(b) => b.to_dtype(dtype)?.detach(),
                None => Tensor::zeros(cout, dtype, w.device())?,
            };
            frozen.insert(format!("l{i}.weight"), w.clone());
            frozen.insert(format!("l{i}.bias"), b.clone());
            let stride = if i == 1 { 1 } else { 2 };
            layers.push(Conv {
                weight: w,
                bias: Some(b),
                stride,
                pad: 1,
            });
            cin = cout;
        }
        if taps.is_empty() {
            return Err(Error::Config("extractor needs at least one tap".into()));
        }
        if let Some(&t) = taps.iter().find(|&&t| t > layers.len()) {
            return Err(Error::Config(format!(
                "tap {t} exceeds the {} extractor layers",
                layers.len()
            )));
        }
        Ok(FeatureExtractor {
            kind,
            taps: taps.to_vec(),
            layers,
            weights: frozen,
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Feature maps at each tap, in tap order.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let deepest = *self.taps.iter().max().expect("non-empty taps");
        let mut by_layer = vec![x.clone()];
        let mut y = x.clone();
        for layer in &self.layers[..deepest] {
            y = layer.forward(&y)?.gelu()?;
            by_layer.push(y.clone());
        }
        Ok(self.taps.iter().map(|&t| by_layer[t].clone()).collect())
    }

    /// Hash over the exact weight bits.
    pub fn fingerprint(&self) -> Result<u64> {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, t) in &self.weights {
            h.write(k.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.write_u64(v.to_bits());
            }
        }
        Ok(h.finish())
    }
}

fn check_tap_weights(fx: &FeatureExtractor, weights: &LossWeights) -> Result<()> {
    if weights.perceptual_layer_weights.len() != fx.taps.len() {
        return Err(Error::Config(format!(
            "{} perceptual layer weights for {} extractor taps",
            weights.perceptual_layer_weights.len(),
            fx.taps.len()
        )));
    }
    Ok(())
}

/// Weighted sum over taps of the mean absolute feature difference (NCHW).
pub fn perceptual_loss_tensor(
    generated: &Tensor,
    target: &Tensor,
    fx: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<Tensor> {
    check_tap_weights(fx, weights)?;
    if generated.dims() != target.dims() {
        return Err(Error::Contract(format!(
            "perceptual loss on {:?} vs {:?}",
            generated.dims(),
            target.dims()
        )));
    }
    let fa = fx.features(generated)?;
    let fb = fx.features(target)?;
    let mut total = Tensor::zeros((), generated.dtype(), generated.device())?;
    for ((a, b), &w) in fa.iter().zip(&fb).zip(&weights.perceptual_layer_weights) {
        total = (total + ((a - b)?.abs()?.mean_all()? * w)?)?;
    }
    Ok(total)
}

pub fn perceptual_loss(
    generated: &ImageTensor,
    target: &ImageTensor,
    fx: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<f64> {
    if generated.dims() != target.dims() {
        return Err(Error::Contract(
            "perceptual loss inputs are not aligned".into(),
        ));
    }
    let dev = Device::Cpu;
    let a = convert::images_to_tensor(&[generated], DType::F64, &dev)?;
    let b = convert::images_to_tensor(&[target], DType::F64, &dev)?;
    let fx = fx.with_dtype(DType::F64)?;
    scalar(&perceptual_loss_tensor(&a, &b, &fx, weights)?)
}

impl FeatureExtractor {
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        let weights = self
            .weights
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_weights(self.kind, weights, &self.taps, dtype)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(logits: &[Tensor], what: &str) -> Result<()> {
    for (s, l) in logits.iter().enumerate() {
        let vals = l.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some((i, v)) = vals.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what} logits at scale {s} are non-finite: element {i} = {v} (shape {:?})",
                l.dims()
            )));
        }
    }
    Ok(())
}

/// `log sigmoid(x)` on clamped logits.
fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?;
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.log()?.neg()?)
}

/// `mean_s [mean log D(real_s) + mean log(1 - D(fake_s))]`, maximization form.
pub fn d_objective(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Contract(format!(
            "{} real and {} fake logit maps",
            real.len(),
            fake.len()
        )));
    }
    check_finite(real, "real")?;
    check_finite(fake, "fake")?;
    let mut acc = Tensor::zeros((), real[0].dtype(), real[0].device())?;
    for (r, f) in real.iter().zip(fake) {
        let term = (log_sigmoid(r)?.mean_all()? + log_sigmoid(&f.neg()?)?.mean_all()?)?;
        acc = (acc + term)?;
    }
    Ok((acc / real.len() as f64)?)
}

/// Non-saturating generator loss `mean_s -mean log D(fake_s)`.
pub fn g_objective(fake: &[Tensor]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::Contract("no fake logit maps".into()));
    }
    check_finite(fake, "fake")?;
    let mut acc = Tensor::zeros((), fake[0].dtype(), fake[0].device())?;
    for f in fake {
        acc = (acc - log_sigmoid(f)?.mean_all()?)?;
    }
    Ok((acc / fake.len() as f64)?)
}

/// `(d_loss, g_loss)` for one conditional sample pair.
pub fn adversarial_losses(
    e_t: &EdgeMap,
    i_r: &ImageTensor,
    i_t: &ImageTensor,
    i_gen: &ImageTensor,
    disc: &MultiScaleDiscriminator,
    dtype: DType,
) -> Result<(f64, f64)> {
    if e_t.dims() != i_r.dims() || i_t.dims() != i_r.dims() || i_gen.dims() != i_r.dims() {
        return Err(Error::Contract(
            "adversarial loss inputs are not aligned".into(),
        ));
    }
    let dev = Device::Cpu;
    let e = convert::edges_to_tensor(&[e_t], dtype, &dev)?;
    let r = convert::images_to_tensor(&[i_r], dtype, &dev)?;
    let t = convert::images_to_tensor(&[i_t], dtype, &dev)?;
    let g = convert::images_to_tensor(&[i_gen], dtype, &dev)?;
    let real = disc.forward(&e, &r, &t)?;
    let fake = disc.forward(&e, &r, &g)?;
    Ok((
        scalar(&d_objective(&real, &fake)?)?,
        scalar(&g_objective(&fake)?)?,
    ))
}

/// Mean squared error between a predicted heatmap and its target (NCHW).
pub fn heatmap_loss_tensor(h: &Tensor, target: &Tensor) -> Result<Tensor> {
    if h.dims() != target.dims() {
        return Err(Error::Contract(format!(
            "heatmap {:?} vs target {:?}",
            h.dims(),
            target.dims()
        )));
    }
    Ok((h - target)?.sqr()?.mean_all()?)
}

pub fn heatmap_loss(h: &Heatmap, m: &RegionMask) -> Result<f64> {
    if h.dims() != (m.height(), m.width()) {
        return Err(Error::Contract("heatmap and mask are not aligned".into()));
    }
    let sum: f64 = h
        .data()
        .iter()
        .zip(m.bits())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / h.data().len() as f64)
}

/// Heatmap regression against a soft target such as a teacher heatmap.
pub fn heatmap_loss_soft(h: &Heatmap, target: &Heatmap) -> Result<f64> {
    if h.dims() != target.dims() {
        return Err(Error::Contract("heatmaps are not aligned".into()));
    }
    let sum: f64 = h
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / h.data().len() as f64)
}

/// Scalar-like values the stage totals can be formed over.
pub trait LossValue: Sized {
    fn scaled(&self, w: f64) -> Result<Self>;
    fn plus(&self, other: &Self) -> Result<Self>;
}

impl LossValue for f64 {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok(self * w)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }
}

impl LossValue for Tensor {
    fn scaled(&self, w: f64) -> Result<Self> {
        Ok((self * w)?)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok((self + other)?)
    }
}

/// Components of one stage total. `adversarial` is the generator-side term.
#[derive(Clone, Debug)]
pub struct StageLosses<T> {
    pub perceptual: T,
    pub adversarial: T,
    pub heatmap: Option<T>,
}

pub fn total_loss<T: LossValue>(
    stage: Stage,
    c: &StageLosses<T>,
    weights: &LossWeights,
) -> Result<T> {
    let base = c.perceptual.plus(&c.adversarial)?;
    let w = match stage {
        Stage::Boot => {
            if c.heatmap.is_some() {
                return Err(Error::Contract("boot stage takes no heatmap term".into()));
            }
            return Ok(base);
        }
        Stage::Flare => weights.w_fh,
        Stage::Blaze => weights.w_bh,
    };
    let h = c
        .heatmap
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{stage} stage requires a heatmap term")))?;
    h.scaled(w)?.plus(&base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(rng: &mut ChaCha8Rng, n: usize) -> ImageTensor {
        ImageTensor::from_fn(n, n, |_, _, _| rng.random())
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let fx =
            FeatureExtractor::fixed_random(&[1, 2, 3, 4], 1, DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_image(&mut rng, 16);
        let b = rand_image(&mut rng, 16);
        assert_eq!(perceptual_loss(&a, &a, &fx, &w).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &fx, &w).unwrap();
        let ba = perceptual_loss(&b, &a, &fx, &w).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn raw_pixel_tap_is_mean_abs_difference() {
        let fx = FeatureExtractor::fixed_random(&[0], 1, DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights {
            perceptual_layer_weights: vec![1.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_image(&mut rng, 8);
            let b = rand_image(&mut rng, 8);
            let direct: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum::<f64>()
                / a.data().len() as f64;
            let got = perceptual_loss(&a, &b, &fx, &w).unwrap();
            assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
        }
    }

    #[test]
    fn tap_weight_count_must_match() {
        let fx = FeatureExtractor::fixed_random(&[1, 2], 1, DType::F64, &Device::Cpu).unwrap();
        let img = ImageTensor::zeros(8, 8);
        assert!(matches!(
            perceptual_loss(&img, &img, &fx, &LossWeights::default()),
            Err(Error::Config(_))
        ));
        assert!(FeatureExtractor::fixed_random(&[9], 1, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn pretrained_needs_cache_file() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("perceptual.safetensors");
        assert!(matches!(
            FeatureExtractor::pretrained(&missing, &[1], DType::F32, &Device::Cpu),
            Err(Error::Io { .. })
        ));
        // a file in the expected layout loads and taps the given layers
        let src = FeatureExtractor::fixed_random(&[1, 2], 4, DType::F32, &Device::Cpu).unwrap();
        let bytes = safetensors::serialize(src.weights.iter(), None).unwrap();
        std::fs::write(&missing, bytes).unwrap();
        let fx = FeatureExtractor::pretrained(&missing, &[1, 2], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(fx.kind(), ExtractorKind::PretrainedPerceptual);
        assert_eq!(fx.fingerprint().unwrap(), src.fingerprint().unwrap());
    }

    fn logits(v: f64, n: usize) -> Tensor {
        Tensor::full(v, (1, 1, n, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn even_discriminator_gives_minus_two_ln_two() {
        let d = d_objective(
            &[logits(0.0, 3), logits(0.0, 2)],
            &[logits(0.0, 3), logits(0.0, 2)],
        )
        .unwrap();
        assert!((scalar(&d).unwrap() + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_approaches_zero_from_below() {
        let mut prev = f64::NEG_INFINITY;
        for m in [1.0, 3.0, 6.0, 10.0, 14.0] {
            let d = scalar(&d_objective(&[logits(m, 2)], &[logits(-m, 2)]).unwrap()).unwrap();
            assert!(d < 0.0 && d > prev);
            prev = d;
        }
        assert!(prev > -1e-5);
    }

    #[test]
    fn clamped_logits_stay_finite() {
        let d = scalar(&d_objective(&[logits(-1e6, 2)], &[logits(1e6, 2)]).unwrap()).unwrap();
        let g = scalar(&g_objective(&[logits(-1e6, 2)]).unwrap()).unwrap();
        assert!(d.is_finite() && g.is_finite());
    }

    #[test]
    fn non_finite_logits_are_numerical_errors() {
        let bad = Tensor::new(&[[[[0.0f64, f64::NAN]]]], &Device::Cpu).unwrap();
        assert!(matches!(
            d_objective(&[bad.clone()], &[bad.clone()]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(g_objective(&[bad]), Err(Error::Numerical(_))));
    }

    #[test]
    fn g_gradient_pushes_fake_logits_up() {
        for x0 in [-3.0, -0.5, 0.0, 2.0] {
            let v = Var::new(&[[[[x0]]]], &Device::Cpu).unwrap();
            let loss = g_objective(&[v.as_tensor().clone()]).unwrap();
            let grad = loss
                .backward()
                .unwrap()
                .get(v.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap();
            let auto = grad.to_vec1::<f64>().unwrap()[0];
            let f = |x: f64| scalar(&g_objective(&[logits(x, 1)]).unwrap()).unwrap();
            let fd = (f(x0 + 1e-4) - f(x0 - 1e-4)) / 2e-4;
            assert!(fd < 0.0 && auto < 0.0);
            assert!((auto - fd).abs() <= 1e-3 * fd.abs());
        }
    }

    #[test]
    fn heatmap_loss_values() {
        let m = RegionMask::from_fn(8, 8, |y, x| (y + x) % 3 == 0);
        assert_eq!(heatmap_loss(&m.to_heatmap(), &m).unwrap(), 0.0);
        assert_eq!(
            heatmap_loss(&Heatmap::filled(8, 8, 1.0), &RegionMask::empty(8, 8)).unwrap(),
            1.0
        );
        assert_eq!(heatmap_loss(&Heatmap::filled(8, 8, 0.5), &m).unwrap(), 0.25);
        assert!(heatmap_loss(&Heatmap::zeros(4, 8), &m).is_err());
    }

    #[test]
    fn stage_totals() {
        let w = LossWeights::default();
        let c = StageLosses {
            perceptual: 1.0,
            adversarial: 0.5,
            heatmap: Some(0.04),
        };
        assert!((total_loss(Stage::Flare, &c, &w).unwrap() - 1.9).abs() < 1e-9);
        assert_eq!(
            total_loss(Stage::Flare, &c, &w).unwrap(),
            total_loss(Stage::Blaze, &c, &w).unwrap()
        );
        assert!(matches!(
            total_loss(Stage::Boot, &c, &w),
            Err(Error::Contract(_))
        ));
        let zero = LossWeights {
            w_fh: 0.0,
            ..Default::default()
        };
        let boot = StageLosses {
            heatmap: None,
            ..c.clone()
        };
        assert_eq!(
            total_loss(Stage::Flare, &c, &zero).unwrap(),
            total_loss(Stage::Boot, &boot, &w).unwrap()
        );
        assert!(total_loss(Stage::Blaze, &boot, &w).is_err());
    }

    #[test]
    fn loss_weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            w_bh: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn heatmap_loss_bounded_and_symmetric(vals in proptest::collection::vec(0.0f32..=1.0, 16), bits in proptest::collection::vec(0u8..=1, 16)) {
            let h = Heatmap::from_fn(4, 4, |y, x, _| vals[y * 4 + x]);
            let m = RegionMask::from_bits(4, 4, bits).unwrap();
            let l = heatmap_loss(&h, &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            let swapped = heatmap_loss_soft(&m.to_heatmap(), &h).unwrap();
            prop_assert_eq!(l, swapped);
        }
    }
}
