//! Dataset manifests, balanced sampling and per-sample loading.
//!
//! A manifest is UTF-8 text with one record per line, five tab-separated
//! fields: `image_path  edge_path  regions_path  category  dataset`. Relative
//! paths resolve against the manifest's directory. Blank lines are skipped;
//! lines starting with `#` are comments, except an optional `# seed: N`
//! header which sets [`DatasetManifest::seed`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, ImageTensor, RegionMask};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub edge_path: String,
    pub regions_path: String,
    pub category: String,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Sorted, deduplicated set of record categories.
    pub categories: Vec<String>,
    pub seed: u64,
    /// Directory relative record paths are resolved against.
    pub root: PathBuf,
}

const SEED_HEADER: &str = "# seed:";

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, seed: u64, root: impl Into<PathBuf>) -> Self {
        let categories = records
            .iter()
            .map(|r| r.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        DatasetManifest {
            records,
            categories,
            seed,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(category))
            .ok()
    }

    /// Manifest restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        DatasetManifest::new(records, self.seed, self.root.clone())
    }

    /// Same records with every path resolved against `root`, so the
    /// manifest can be written anywhere.
    pub fn absolutized(&self) -> DatasetManifest {
        let root = std::path::absolute(&self.root).unwrap_or_else(|_| self.root.clone());
        let abs = |rel: &str| {
            let p = Path::new(rel);
            if p.is_absolute() {
                rel.to_string()
            } else {
                root.join(p).to_string_lossy().into_owned()
            }
        };
        let records = self
            .records
            .iter()
            .map(|r| SampleRecord {
                image_path: abs(&r.image_path),
                edge_path: abs(&r.edge_path),
                regions_path: abs(&r.regions_path),
                ..r.clone()
            })
            .collect();
        DatasetManifest::new(records, self.seed, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SEED_HEADER} {}\n", self.seed);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.image_path, r.edge_path, r.regions_path, r.category, r.dataset
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    /// Checks that every record's files exist and share spatial dimensions.
    pub fn validate(&self) -> Result<()> {
        for (index, r) in self.records.iter().enumerate() {
            let fail = |msg: String| Error::Validation {
                index,
                image_path: r.image_path.clone(),
                msg,
            };
            let mut dims = Vec::with_capacity(3);
            for (what, rel) in [
                ("image", &r.image_path),
                ("edge", &r.edge_path),
                ("regions", &r.regions_path),
            ] {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(fail(format!("{what} file {} does not exist", p.display())));
                }
                let d = image::image_dimensions(&p)
                    .map_err(|e| fail(format!("{what} file {}: {e}", p.display())))?;
                dims.push(d);
            }
            if dims.iter().any(|&d| d != dims[0]) {
                return Err(fail(format!("dimension mismatch {dims:?}")));
            }
        }
        Ok(())
    }
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<SampleRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected 5 tab-separated fields, found {}", fields.len()),
        });
    }
    if let Some(i) = fields.iter().position(|f| f.trim().is_empty()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("field {} is empty", i + 1),
        });
    }
    Ok(SampleRecord {
        image_path: fields[0].to_string(),
        edge_path: fields[1].to_string(),
        regions_path: fields[2].to_string(),
        category: fields[3].to_string(),
        dataset: fields[4].to_string(),
    })
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seed = 0u64;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(SEED_HEADER) {
            seed = rest.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("bad seed header {line:?}"),
            })?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        records.push(parse_line(path, line_no, line)?);
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = DatasetManifest::new(records, seed, root);
    manifest.validate()?;
    Ok(manifest)
}

/// Per category (in sorted category order) draws `min(cap, available)`
/// records uniformly without replacement.
pub fn balanced_sample(
    manifest: &DatasetManifest,
    per_category_cap: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if per_category_cap == 0 {
        return Err(Error::Param("per_category_cap must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cat in &manifest.categories {
        let members: Vec<&SampleRecord> = manifest
            .records
            .iter()
            .filter(|r| &r.category == cat)
            .collect();
        let k = per_category_cap.min(members.len());
        let mut picked = index::sample(&mut rng, members.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

/// A decoded sample at training resolution.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image: ImageTensor,
    pub edge: EdgeMap,
    pub regions: Vec<RegionMask>,
}

pub fn load_sample(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    resolution: usize,
) -> Result<LoadedSample> {
    let image = ImageTensor::load_png(&manifest.resolve(&record.image_path))?
        .resize(resolution, resolution);
    let edge = EdgeMap::load_png(&manifest.resolve(&record.edge_path))?
        .resize_nearest(resolution, resolution);
    let regions = read_region_labels(&manifest.resolve(&record.regions_path))?
        .into_iter()
        .map(|m| m.resize_nearest(resolution, resolution))
        .collect::<Vec<_>>();
    assert_eq!(image.dims(), edge.dims());
    assert!(regions.iter().all(|m| m.dims() == image.dims()));
    Ok(LoadedSample {
        image,
        edge,
        regions,
    })
}

/// Reads an index-labeled region map: label `k > 0` marks region `k`.
/// Regions are returned in ascending label order; absent labels are skipped.
pub fn read_region_labels(path: &Path) -> Result<Vec<RegionMask>> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h, labels): (usize, usize, Vec<u16>) = match img {
        DynamicImage::ImageLuma8(g) => (
            g.width() as usize,
            g.height() as usize,
            g.into_raw().into_iter().map(u16::from).collect(),
        ),
        DynamicImage::ImageLuma16(g) => (g.width() as usize, g.height() as usize, g.into_raw()),
        other => {
            let g = other.to_luma8();
            (
                g.width() as usize,
                g.height() as usize,
                g.into_raw().into_iter().map(u16::from).collect(),
            )
        }
    };
    let present: BTreeSet<u16> = labels.iter().copied().filter(|&l| l != 0).collect();
    Ok(present
        .into_iter()
        .map(|l| {
            let bits = labels.iter().map(|&v| (v == l) as u8).collect();
            RegionMask::from_bits(h, w, bits).expect("label map dimensions")
        })
        .collect())
}

/// Writes regions as an 8-bit label map; later regions overwrite earlier ones
/// where they overlap.
pub fn write_region_labels(
    path: &Path,
    height: usize,
    width: usize,
    regions: &[RegionMask],
) -> Result<()> {
    if regions.len() > 255 {
        return Err(Error::Param(format!(
            "label map holds at most 255 regions, got {}",
            regions.len()
        )));
    }
    let mut img = GrayImage::new(width as u32, height as u32);
    for (k, m) in regions.iter().enumerate() {
        if m.dims() != (height, width) {
            return Err(Error::Contract(
                "region shape differs from label map".into(),
            ));
        }
        for y in 0..height {
            for x in 0..width {
                if m.contains(y, x) {
                    img.put_pixel(x as u32, y as u32, Luma([(k + 1) as u8]));
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_sample(dir: &Path, name: &str, size: u32) -> SampleRecord {
        let img = image::RgbImage::from_pixel(size, size, image::Rgb([10, 20, 30]));
        img.save(dir.join(format!("{name}.png"))).unwrap();
        GrayImage::new(size, size)
            .save(dir.join(format!("{name}_edge.png")))
            .unwrap();
        let mut labels = GrayImage::new(size, size);
        labels.put_pixel(0, 0, Luma([1]));
        labels
            .save(dir.join(format!("{name}_regions.png")))
            .unwrap();
        SampleRecord {
            image_path: format!("{name}.png"),
            edge_path: format!("{name}_edge.png"),
            regions_path: format!("{name}_regions.png"),
            category: String::new(),
            dataset: "toy".into(),
        }
    }

    fn toy_manifest(dir: &Path, per_cat: &[(&str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (cat, n) in per_cat {
            for i in 0..*n {
                let mut r = write_sample(dir, &format!("{cat}_{i}"), 8);
                r.category = cat.to_string();
                records.push(r);
            }
        }
        DatasetManifest::new(records, 3, dir)
    }

    #[test]
    fn load_six_records_two_categories() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), &[("zeta", 3), ("alpha", 3)]);
        let p = dir.path().join("manifest.tsv");
        m.write(&p).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded.records.len(), 6);
        assert_eq!(
            loaded.categories,
            vec!["alpha".to_string(), "zeta".to_string()]
        );
        assert_eq!(loaded, m);
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.records.is_empty());
        assert!(m.categories.is_empty());
    }

    #[test]
    fn missing_file_is_load_error() {
        let err = load_manifest(Path::new("/nonexistent/m.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "# seed: 1\n\na\tb\tc\n").unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_image_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(dir.path(), &[("a", 2)]);
        m.records[1].image_path = "gone.png".into();
        let p = dir.path().join("m.tsv");
        m.write(&p).unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Validation {
                index, image_path, ..
            } => {
                assert_eq!(index, 1);
                assert_eq!(image_path, "gone.png");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), &[("a", 1)]);
        GrayImage::new(4, 4)
            .save(dir.path().join("a_0_edge.png"))
            .unwrap();
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));
    }

    fn fake_manifest(per_cat: &[(&str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (cat, n) in per_cat {
            for i in 0..*n {
                records.push(SampleRecord {
                    image_path: format!("{cat}/{i}.png"),
                    edge_path: format!("{cat}/{i}_e.png"),
                    regions_path: format!("{cat}/{i}_r.png"),
                    category: cat.to_string(),
                    dataset: "toy".into(),
                });
            }
        }
        DatasetManifest::new(records, 0, ".")
    }

    #[test]
    fn balanced_sample_counts() {
        let m = fake_manifest(&[("a", 10), ("b", 10), ("c", 10)]);
        let s = balanced_sample(&m, 4, 7).unwrap();
        assert_eq!(s.len(), 12);
        for cat in ["a", "b", "c"] {
            assert_eq!(s.iter().filter(|r| r.category == cat).count(), 4);
        }
        // category order
        assert!(s[..4].iter().all(|r| r.category == "a"));
        assert!(s[8..].iter().all(|r| r.category == "c"));
    }

    #[test]
    fn balanced_sample_cap_above_available() {
        let m = fake_manifest(&[("a", 150)]);
        assert_eq!(balanced_sample(&m, 200, 1).unwrap().len(), 150);
        assert!(balanced_sample(&m, 0, 1).is_err());
    }

    #[test]
    fn balanced_sample_seeds_map_into_enumerated_subsets() {
        let m = fake_manifest(&[("a", 5)]);
        // all C(5,2) subsets
        let mut all = HashSet::new();
        for i in 0..5 {
            for j in i + 1..5 {
                all.insert(vec![
                    m.records[i].image_path.clone(),
                    m.records[j].image_path.clone(),
                ]);
            }
        }
        assert_eq!(all.len(), 10);
        let pick = |seed| -> Vec<String> {
            balanced_sample(&m, 2, seed)
                .unwrap()
                .into_iter()
                .map(|r| r.image_path)
                .collect()
        };
        let s7 = pick(7);
        let s8 = pick(8);
        assert!(all.contains(&s7));
        assert!(all.contains(&s8));
        assert_ne!(s7, s8);
        // Over many seeds every subset appears, with roughly uniform frequency.
        let mut counts = std::collections::HashMap::new();
        for seed in 0..2000 {
            *counts.entry(pick(seed)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        assert!(
            counts.values().all(|&c| (120..=280).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn load_sample_shapes_and_binarity() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(32, 32, |x, _| image::Rgb([(x * 8) as u8, 0, 0]));
        img.save(dir.path().join("i.png")).unwrap();
        GrayImage::from_fn(32, 32, |x, _| Luma([if x == 16 { 255 } else { 0 }]))
            .save(dir.path().join("e.png"))
            .unwrap();
        let regions = vec![
            RegionMask::from_fn(32, 32, |y, _| y < 10),
            RegionMask::from_fn(32, 32, |y, x| y >= 20 && x >= 20),
        ];
        write_region_labels(&dir.path().join("r.png"), 32, 32, &regions).unwrap();
        let rec = SampleRecord {
            image_path: "i.png".into(),
            edge_path: "e.png".into(),
            regions_path: "r.png".into(),
            category: "c".into(),
            dataset: "toy".into(),
        };
        let m = DatasetManifest::new(vec![rec.clone()], 0, dir.path());
        let s = load_sample(&m, &rec, 16).unwrap();
        assert_eq!(s.image.dims(), (16, 16));
        assert_eq!(s.edge.dims(), (16, 16));
        assert_eq!(s.regions.len(), 2);
        for r in &s.regions {
            assert_eq!(r.dims(), (16, 16));
            assert!(r.bits().iter().all(|&b| b <= 1));
        }
        let (lo, hi) = s.image.raster().min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn black_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::new(8, 8)
            .save(dir.path().join("i.png"))
            .unwrap();
        GrayImage::new(8, 8).save(dir.path().join("e.png")).unwrap();
        GrayImage::new(8, 8).save(dir.path().join("r.png")).unwrap();
        let rec = SampleRecord {
            image_path: "i.png".into(),
            edge_path: "e.png".into(),
            regions_path: "r.png".into(),
            category: "c".into(),
            dataset: "toy".into(),
        };
        let m = DatasetManifest::new(vec![rec.clone()], 0, dir.path());
        let s = load_sample(&m, &rec, 8).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0.0));
        assert!(s.regions.is_empty());
    }
}
