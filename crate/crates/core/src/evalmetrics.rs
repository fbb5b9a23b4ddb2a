//! Generation metrics (Inception-style score, cluster-based perceptual
//! diversity) and pixel-level localization scoring.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::manifest::DatasetManifest;
use crate::netarch::convert::images_to_tensor;
use crate::raster::{Heatmap, ImageTensor, RegionMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub gen_list_size: usize,
    pub n_groups: usize,
    pub is_splits: usize,
    pub fixed_seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            gen_list_size: 1000,
            n_groups: 100,
            is_splits: 10,
            fixed_seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.gen_list_size % self.n_groups != 0 {
            return Err(Error::Protocol(format!(
                "gen_list_size {} is not divisible by n_groups {}",
                self.gen_list_size, self.n_groups
            )));
        }
        if self.is_splits == 0 || self.is_splits > self.gen_list_size {
            return Err(Error::Protocol(format!("bad is_splits {}", self.is_splits)));
        }
        Ok(())
    }
}

/// Maps images to class probability vectors.
pub trait Classifier {
    fn probabilities(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

const SIMPLEX_TOL: f64 = 1e-6;

fn check_simplex(p: &[f64], i: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty()
        || p.iter().any(|&v| !(v >= -SIMPLEX_TOL) || !v.is_finite())
        || (sum - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::Contract(format!(
            "classifier output {i} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// `exp(mean_x KL(p(y|x) || p(y)))` per split; returns (mean, population std).
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::Contract("inception score of an empty list".into()));
    }
    if splits == 0 || splits > probs.len() {
        return Err(Error::Protocol(format!(
            "{splits} splits for {} images",
            probs.len()
        )));
    }
    let k = probs[0].len();
    for (i, p) in probs.iter().enumerate() {
        if p.len() != k {
            return Err(Error::Contract(format!(
                "classifier output {i} has {} classes, expected {k}",
                p.len()
            )));
        }
        check_simplex(p, i)?;
    }
    let n = probs.len();
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &probs[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; k];
            for p in part {
                for (m, &v) in marginal.iter_mut().zip(p) {
                    *m += v / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&v, _)| v > 0.0)
                        .map(|(&v, &m)| v * (v.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(
    images: &[ImageTensor],
    classifier: &dyn Classifier,
    splits: usize,
) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::Contract("inception score of an empty list".into()));
    }
    inception_score_from_probs(&classifier.probabilities(images)?, splits)
}

/// Globally pooled extractor features, one vector per image.
fn pooled_features(fx: &FeatureExtractor, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = images_to_tensor(&refs, DType::F64, &Device::Cpu)?;
        let feats = fx.features(&x)?;
        let pooled = feats
            .iter()
            .map(|f| Ok(f.flatten_from(2)?.mean(D::Minus1)?))
            .collect::<Result<Vec<Tensor>>>()?;
        let rows = Tensor::cat(&pooled, 1)?.to_vec2::<f64>()?;
        out.extend(rows);
    }
    Ok(out)
}

/// Frozen nearest-centroid classifier over pooled extractor features:
/// `p(k|x) ∝ exp(-|f(x) - c_k|^2 / temperature)`.
#[derive(Clone, Debug)]
pub struct CentroidClassifier {
    fx: FeatureExtractor,
    centroids: Vec<Vec<f64>>,
    temperature: f64,
}

impl CentroidClassifier {
    /// Centroids from labeled images; the temperature is the mean squared
    /// distance of training features to their own centroid.
    pub fn fit(
        fx: &FeatureExtractor,
        images: &[ImageTensor],
        labels: &[usize],
        classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Contract(
                "classifier needs one label per image".into(),
            ));
        }
        let fx = fx.with_dtype(DType::F64)?;
        let feats = pooled_features(&fx, images)?;
        let dim = feats[0].len();
        let mut centroids = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (f, &l) in feats.iter().zip(labels) {
            if l >= classes {
                return Err(Error::Contract(format!(
                    "label {l} out of {classes} classes"
                )));
            }
            counts[l] += 1;
            for (c, v) in centroids[l].iter_mut().zip(f) {
                *c += v;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            if n == 0 {
                return Err(Error::Contract(
                    "every class needs at least one image".into(),
                ));
            }
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let spread = feats
            .iter()
            .zip(labels)
            .map(|(f, &l)| sq_dist(f, &centroids[l]))
            .sum::<f64>()
            / feats.len() as f64;
        Ok(CentroidClassifier {
            fx,
            centroids,
            temperature: spread.max(1e-12),
        })
    }

    pub fn classes(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl Classifier for CentroidClassifier {
    fn probabilities(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(pooled_features(&self.fx, images)?
            .iter()
            .map(|f| {
                let logits: Vec<f64> = self
                    .centroids
                    .iter()
                    .map(|c| -sq_dist(f, c) / self.temperature)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect())
    }
}

/// Channel-normalized extractor features of one image, one flat block per
/// tap, for LPIPS-style distances.
#[derive(Clone, Debug)]
pub struct UnitFeatures {
    taps: Vec<(Vec<f32>, usize)>,
}

impl UnitFeatures {
    /// Per tap: squared differences summed over channels and averaged over
    /// space; summed over taps.
    pub fn distance(&self, other: &UnitFeatures) -> f64 {
        self.taps
            .iter()
            .zip(&other.taps)
            .map(|((a, area), (b, _))| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| ((x - y) as f64).powi(2))
                    .sum::<f64>()
                    / *area as f64
            })
            .sum()
    }
}

pub fn unit_features(fx: &FeatureExtractor, images: &[ImageTensor]) -> Result<Vec<UnitFeatures>> {
    let fx = fx.with_dtype(DType::F64)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = images_to_tensor(&refs, DType::F64, &Device::Cpu)?;
        let mut per_image: Vec<Vec<(Vec<f32>, usize)>> = vec![Vec::new(); chunk.len()];
        for f in fx.features(&x)? {
            let (_, _, h, w) = f.dims4()?;
            let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?.affine(1.0, 1e-10)?;
            let unit = f.broadcast_div(&norm)?.to_dtype(DType::F32)?;
            for (i, slot) in per_image.iter_mut().enumerate() {
                slot.push((unit.get(i)?.flatten_all()?.to_vec1::<f32>()?, h * w));
            }
        }
        out.extend(per_image.into_iter().map(|taps| UnitFeatures { taps }));
    }
    Ok(out)
}

pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, fx: &FeatureExtractor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(
            "perceptual distance inputs are not aligned".into(),
        ));
    }
    let f = unit_features(fx, &[a.clone(), b.clone()])?;
    Ok(f[0].distance(&f[1]))
}

/// Pairwise distance matrix from cached features.
pub fn distance_matrix(features: &[UnitFeatures]) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = features[i].distance(&features[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Greedy grouping: seed each group with the first unassigned item and add
/// its `size - 1` nearest unassigned neighbours (ties by index).
pub fn greedy_groups(dist: &[Vec<f64>], n_groups: usize) -> Result<Vec<Vec<usize>>> {
    let n = dist.len();
    if n_groups == 0 || n % n_groups != 0 {
        return Err(Error::Protocol(format!(
            "{n} items cannot form {n_groups} equal groups"
        )));
    }
    let size = n / n_groups;
    let mut free = vec![true; n];
    let mut groups = Vec::with_capacity(n_groups);
    for seed in 0..n {
        if !free[seed] {
            continue;
        }
        free[seed] = false;
        let mut cands: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
        cands.sort_by(|&i, &j| dist[seed][i].total_cmp(&dist[seed][j]).then(i.cmp(&j)));
        let mut g = vec![seed];
        for &j in cands.iter().take(size - 1) {
            free[j] = false;
            g.push(j);
        }
        groups.push(g);
    }
    Ok(groups)
}

/// Mean over groups of the mean pairwise distance (0 for singletons).
pub fn partition_score(dist: &[Vec<f64>], groups: &[Vec<usize>]) -> f64 {
    let per_group = groups.iter().map(|g| {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                sum += dist[i][j];
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            sum / pairs as f64
        }
    });
    per_group.sum::<f64>() / groups.len().max(1) as f64
}

pub fn cluster_lpips_from_matrix(dist: &[Vec<f64>], n_groups: usize) -> Result<f64> {
    Ok(partition_score(dist, &greedy_groups(dist, n_groups)?))
}

pub fn cluster_lpips(
    images: &[ImageTensor],
    n_groups: usize,
    dist: impl Fn(&ImageTensor, &ImageTensor) -> Result<f64>,
) -> Result<f64> {
    let n = images.len();
    if n_groups == 0 || n % n_groups != 0 {
        return Err(Error::Protocol(format!(
            "{n} images cannot form {n_groups} equal groups"
        )));
    }
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(&images[i], &images[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    cluster_lpips_from_matrix(&m, n_groups)
}

/// Pooled pixel AUROC (Mann-Whitney with midranks for ties).
pub fn pixel_auroc(heatmaps: &[Heatmap], gt_masks: &[RegionMask]) -> Result<f64> {
    if heatmaps.len() != gt_masks.len() {
        return Err(Error::Contract(format!(
            "{} heatmaps for {} masks",
            heatmaps.len(),
            gt_masks.len()
        )));
    }
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (i, (h, m)) in heatmaps.iter().zip(gt_masks).enumerate() {
        if h.dims() != m.dims() {
            return Err(Error::Contract(format!(
                "heatmap {i} and mask {i} are not aligned"
            )));
        }
        scored.extend(h.data().iter().zip(m.bits()).map(|(&s, &b)| (s, b == 1)));
    }
    let pos = scored.iter().filter(|(_, p)| *p).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedScore(format!(
            "ground truth has {pos} positive and {neg} negative pixels"
        )));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * scored[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fixed evaluation list: a seeded ordering of the manifest, cycled to
/// `size` records.
pub fn fixed_eval_list(
    manifest: &DatasetManifest,
    size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::Protocol(
            "cannot draw an evaluation list from an empty manifest".into(),
        ));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let picks: Vec<usize> = order.iter().cycle().take(size).copied().collect();
    let mut out = manifest.subset(&picks);
    out.seed = seed;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub is_mean: f64,
    pub is_std: f64,
    pub lpips: f64,
    pub lpips_x10: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricRow>,
}

impl Report {
    pub fn push(&mut self, category: &str, is: (f64, f64), lpips: f64) {
        self.rows.push(MetricRow {
            category: category.to_string(),
            is_mean: is.0,
            is_std: is.1,
            lpips,
            lpips_x10: 10.0 * lpips,
        });
    }

    /// Row of column means over the categories present.
    pub fn mean_row(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            category: "mean".into(),
            is_mean: avg(|r| r.is_mean),
            is_std: avg(|r| r.is_std),
            lpips: avg(|r| r.lpips),
            lpips_x10: avg(|r| r.lpips_x10),
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .chain(self.mean_row().as_ref())
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>9}",
            "category", "IS", "IS std", "LPIPS", "LPIPSx10"
        );
        for r in self.rows.iter().chain(self.mean_row().as_ref()) {
            let _ = writeln!(
                s,
                "{:<16} {:>8.3} {:>8.3} {:>8.4} {:>9.3}",
                r.category, r.is_mean, r.is_std, r.lpips, r.lpips_x10
            );
        }
        s
    }
}
