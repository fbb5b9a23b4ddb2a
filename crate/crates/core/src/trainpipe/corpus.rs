//! Parametric toy corpus: per-category objects made of a few colored parts,
//! with precomputed edges and part label maps, plus held-out normals and
//! defective images with ground-truth masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::derive_seed;
use crate::edgeops::{extract_edges, EdgeExtractorConfig};
use crate::error::Result;
use crate::fsutil::ensure_dir;
use crate::manifest::{write_region_labels, DatasetManifest, SampleRecord};
use crate::raster::{ImageTensor, RegionMask};

const KINDS: [&str; 4] = ["ring", "board", "bars", "cross"];

#[derive(Clone, Copy, Debug)]
enum Part {
    Disc {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Annulus {
        cy: f64,
        cx: f64,
        r0: f64,
        r1: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        hh: f64,
        hw: f64,
        angle: f64,
    },
}

impl Part {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Part::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Part::Annulus { cy, cx, r0, r1 } => {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 >= r0 * r0 && d2 <= r1 * r1
            }
            Part::Rect {
                cy,
                cx,
                hh,
                hw,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dy - s * dx;
                let v = s * dy + c * dx;
                u.abs() <= hh && v.abs() <= hw
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Palette {
    background: [f32; 3],
    body: [f32; 3],
    accent: [f32; 3],
}

fn palette(category: usize, seed: u64) -> Palette {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC0105, category as u64]));
    let mut color = |lo: f32, hi: f32| [0; 3].map(|_: u8| rng.random_range(lo..hi));
    Palette {
        background: color(0.05, 0.3),
        body: color(0.45, 0.75),
        accent: color(0.8, 1.0),
    }
}

/// Object parts for one image; index 0 is the body.
fn layout(kind: usize, rng: &mut ChaCha8Rng) -> Vec<(Part, bool)> {
    let cy = 0.5 + rng.random_range(-0.04..0.04);
    let cx = 0.5 + rng.random_range(-0.04..0.04);
    let turn = rng.random_range(-0.2..0.2);
    match kind % KINDS.len() {
        0 => {
            let mut parts = vec![(
                Part::Annulus {
                    cy,
                    cx,
                    r0: 0.16,
                    r1: 0.3,
                },
                false,
            )];
            for k in 0..4 {
                let a = turn + k as f64 * std::f64::consts::FRAC_PI_2;
                parts.push((
                    Part::Disc {
                        cy: cy + 0.23 * a.sin(),
                        cx: cx + 0.23 * a.cos(),
                        r: 0.05,
                    },
                    true,
                ));
            }
            parts
        }
        1 => {
            let mut parts = vec![(
                Part::Rect {
                    cy,
                    cx,
                    hh: 0.3,
                    hw: 0.3,
                    angle: turn * 0.5,
                },
                false,
            )];
            for (dy, dx) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                parts.push((
                    Part::Rect {
                        cy: cy + 0.14 * dy,
                        cx: cx + 0.14 * dx,
                        hh: 0.07,
                        hw: 0.07,
                        angle: turn * 0.5,
                    },
                    true,
                ));
            }
            parts
        }
        2 => {
            let mut parts = vec![(
                Part::Rect {
                    cy,
                    cx,
                    hh: 0.34,
                    hw: 0.22,
                    angle: 0.0,
                },
                false,
            )];
            for k in -1..=1 {
                parts.push((
                    Part::Rect {
                        cy: cy + 0.18 * k as f64,
                        cx,
                        hh: 0.05,
                        hw: 0.17,
                        angle: turn * 0.3,
                    },
                    true,
                ));
            }
            parts
        }
        _ => {
            let mut parts = vec![
                (
                    Part::Rect {
                        cy,
                        cx,
                        hh: 0.32,
                        hw: 0.09,
                        angle: turn,
                    },
                    false,
                ),
                (
                    Part::Rect {
                        cy,
                        cx,
                        hh: 0.09,
                        hw: 0.32,
                        angle: turn,
                    },
                    false,
                ),
            ];
            parts.push((Part::Disc { cy, cx, r: 0.07 }, true));
            parts
        }
    }
}

struct Rendered {
    image: ImageTensor,
    /// Label per pixel: 0 background, k for part k-1.
    labels: Vec<u8>,
}

fn render(
    parts: &[(Part, bool)],
    skip: Option<usize>,
    pal: &Palette,
    res: usize,
    rng: &mut ChaCha8Rng,
) -> Rendered {
    let mut labels = vec![0u8; res * res];
    for y in 0..res {
        for x in 0..res {
            let (fy, fx) = ((y as f64 + 0.5) / res as f64, (x as f64 + 0.5) / res as f64);
            for (k, (p, _)) in parts.iter().enumerate() {
                if Some(k) != skip && p.contains(fy, fx) {
                    labels[y * res + x] = (k + 1) as u8;
                }
            }
        }
    }
    let jitter: [f32; 3] = [0; 3].map(|_: u8| rng.random_range(-0.04..0.04));
    let noise: Vec<f32> = (0..res * res)
        .map(|_| rng.random_range(-0.01..0.01))
        .collect();
    let image = ImageTensor::from_fn(res, res, |y, x, c| {
        let l = labels[y * res + x] as usize;
        let base = match l {
            0 => pal.background[c],
            k if parts[k - 1].1 => pal.accent[c],
            _ => pal.body[c],
        };
        (base + jitter[c] + noise[y * res + x]).clamp(0.0, 1.0)
    });
    Rendered { image, labels }
}

fn label_regions(labels: &[u8], res: usize, count: usize) -> Vec<RegionMask> {
    (1..=count as u8)
        .map(|k| RegionMask::from_fn(res, res, |y, x| labels[y * res + x] == k))
        .filter(|m| !m.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    MissingPart,
    PastedPatch,
}

/// Training manifest plus held-out sets. In the defect manifest the
/// `regions_path` column holds the ground-truth defect mask (label 1).
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train: DatasetManifest,
    pub heldout: DatasetManifest,
    pub defects: DatasetManifest,
}

#[derive(Clone, Debug)]
pub struct ToyCorpusSpec {
    pub n_per_category: usize,
    pub categories: usize,
    pub resolution: usize,
    pub heldout_per_category: usize,
    pub defects_per_category: usize,
    pub seed: u64,
}

impl ToyCorpusSpec {
    pub fn new(n_per_category: usize, categories: usize, resolution: usize, seed: u64) -> Self {
        ToyCorpusSpec {
            n_per_category,
            categories,
            resolution,
            heldout_per_category: 25,
            defects_per_category: 25,
            seed,
        }
    }
}

pub fn category_name(k: usize) -> String {
    format!("{}{}", KINDS[k % KINDS.len()], k / KINDS.len())
}

struct Writer<'a> {
    root: &'a Path,
    edges: EdgeExtractorConfig,
}

impl Writer<'_> {
    fn write(
        &self,
        subdir: &str,
        stem: &str,
        image: &ImageTensor,
        regions: &[RegionMask],
        category: &str,
    ) -> Result<SampleRecord> {
        let dir = self.root.join(subdir);
        ensure_dir(&dir)?;
        let image_path = format!("{subdir}/{stem}.png");
        let edge_path = format!("{subdir}/{stem}_edge.png");
        let regions_path = format!("{subdir}/{stem}_regions.png");
        image.save_png(&self.root.join(&image_path))?;
        extract_edges(image, &self.edges)?.save_png(&self.root.join(&edge_path))?;
        let (h, w) = image.dims();
        write_region_labels(&self.root.join(&regions_path), h, w, regions)?;
        Ok(SampleRecord {
            image_path,
            edge_path,
            regions_path,
            category: category.to_string(),
            dataset: "toy".into(),
        })
    }
}

/// Renders the corpus under `out_dir` and writes `manifest.tsv`,
/// `heldout.tsv` and `defects.tsv`.
pub fn build_toy_corpus_full(out_dir: &Path, spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    if spec.categories < 2 {
        return Err(crate::Error::Param(format!(
            "need >= 2 categories, got {}",
            spec.categories
        )));
    }
    if spec.resolution < 8 {
        return Err(crate::Error::Param("resolution must be >= 8".into()));
    }
    ensure_dir(out_dir)?;
    let res = spec.resolution;
    let w = Writer {
        root: out_dir,
        edges: EdgeExtractorConfig::default(),
    };
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut defects = Vec::new();
    for c in 0..spec.categories {
        let name = category_name(c);
        let pal = palette(c, spec.seed);
        for (set, tag, n, out) in [
            ("train", 1, spec.n_per_category, &mut train),
            ("heldout", 2, spec.heldout_per_category, &mut heldout),
        ] {
            for i in 0..n {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[c as u64, i as u64, tag]));
                let parts = layout(c, &mut rng);
                let r = render(&parts, None, &pal, res, &mut rng);
                let regions = label_regions(&r.labels, res, parts.len());
                out.push(w.write(
                    &format!("{set}/{name}"),
                    &format!("{i:04}"),
                    &r.image,
                    &regions,
                    &name,
                )?);
            }
        }
        for i in 0..spec.defects_per_category {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[c as u64, i as u64, 0xDEF]));
            let parts = layout(c, &mut rng);
            let kind = if i % 2 == 0 {
                DefectKind::MissingPart
            } else {
                DefectKind::PastedPatch
            };
            let (image, mask) = render_defect(&parts, kind, &pal, spec, c, &mut rng);
            defects.push(w.write(
                &format!("defects/{name}"),
                &format!("{i:04}"),
                &image,
                &[mask],
                &name,
            )?);
        }
    }
    let corpus = ToyCorpus {
        train: DatasetManifest::new(train, spec.seed, out_dir),
        heldout: DatasetManifest::new(heldout, spec.seed, out_dir),
        defects: DatasetManifest::new(defects, spec.seed, out_dir),
    };
    corpus.train.write(&out_dir.join("manifest.tsv"))?;
    corpus.heldout.write(&out_dir.join("heldout.tsv"))?;
    corpus.defects.write(&out_dir.join("defects.tsv"))?;
    Ok(corpus)
}

fn render_defect(
    parts: &[(Part, bool)],
    kind: DefectKind,
    pal: &Palette,
    spec: &ToyCorpusSpec,
    category: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, RegionMask) {
    let res = spec.resolution;
    match kind {
        DefectKind::MissingPart => {
            let removable: Vec<usize> = (0..parts.len()).filter(|&k| parts[k].1).collect();
            let k = removable[rng.random_range(0..removable.len())];
            let full = render(parts, None, pal, res, &mut rng.clone());
            let r = render(parts, Some(k), pal, res, rng);
            let mask = RegionMask::from_fn(res, res, |y, x| {
                full.labels[y * res + x] != r.labels[y * res + x]
            });
            (r.image, mask)
        }
        DefectKind::PastedPatch => {
            let r = render(parts, None, pal, res, rng);
            let foreign = palette(category + spec.categories, spec.seed).accent;
            let patch = Part::Rect {
                cy: rng.random_range(0.3..0.7),
                cx: rng.random_range(0.3..0.7),
                hh: rng.random_range(0.05..0.1),
                hw: rng.random_range(0.05..0.1),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let mask = RegionMask::from_fn(res, res, |y, x| {
                patch.contains((y as f64 + 0.5) / res as f64, (x as f64 + 0.5) / res as f64)
            });
            let image = ImageTensor::from_fn(res, res, |y, x, c| {
                if mask.contains(y, x) {
                    // striped foreign material
                    let stripe = if (x + y) / 2 % 2 == 0 { 0.0 } else { -0.25 };
                    (foreign[c] + stripe).clamp(0.0, 1.0)
                } else {
                    r.image.get(y, x, c)
                }
            });
            (image, mask)
        }
    }
}

/// Builds the corpus and returns the training manifest.
pub fn build_toy_corpus(
    out_dir: &Path,
    n_per_category: usize,
    categories: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    build_toy_corpus_full(
        out_dir,
        &ToyCorpusSpec::new(n_per_category, categories, resolution, seed),
    )
    .map(|c| c.train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{load_manifest, load_sample};

    #[test]
    fn counts_validate_and_masks_are_nonempty() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyCorpusSpec {
            heldout_per_category: 2,
            defects_per_category: 4,
            ..ToyCorpusSpec::new(3, 3, 32, 1)
        };
        let corpus = build_toy_corpus_full(dir.path(), &spec).unwrap();
        assert_eq!(corpus.train.len(), 9);
        assert_eq!(corpus.train.categories.len(), 3);
        let m = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.records, corpus.train.records);
        let d = load_manifest(&dir.path().join("defects.tsv")).unwrap();
        assert_eq!(d.len(), 12);
        for r in &d.records {
            let s = load_sample(&d, r, 32).unwrap();
            assert_eq!(s.regions.len(), 1);
            assert!(!s.regions[0].is_empty());
        }
        let s = load_sample(&m, &m.records[0], 32).unwrap();
        assert!(s.regions.len() >= 2);
        assert!(s.edge.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn fewer_than_two_categories_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_toy_corpus(dir.path(), 2, 1, 32, 0).is_err());
    }
}
