//! Command-line shell over the library: corpus building, the three
//! training stages, generation, detection and evaluation.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    cluster_lpips_from_matrix, distance_matrix, fixed_eval_list, inception_score, pixel_auroc,
    unit_features, CentroidClassifier, Report,
};
use crate::fsutil::{ensure_dir, write_atomic};
use crate::losses::FeatureExtractor;
use crate::manifest::{load_manifest, DatasetManifest, LoadedSample};
use crate::netarch::{Stage, StageWeights};
use crate::raster::{EdgeMap, Heatmap, ImageTensor, RegionMask};
use crate::trainpipe::{
    build_toy_corpus_full, derive_seed, detect, generate_anomaly, load_all, sample_edit_spec,
    train_blaze, train_boot, train_flare, EditSpec, LossRecord, ManipulationParams, StageOutcome,
    ToyCorpusSpec, TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "edgeforge",
    version,
    about = "Edge-guided anomaly generation and localization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic toy corpus and write its manifests.
    BuildCorpus(BuildCorpusArgs),
    /// Train one stage; flare and blaze need the previous stage's checkpoint.
    Train(TrainArgs),
    /// Generate (anomaly image, heatmap, mask) triples with the flare stage.
    Generate(GenerateArgs),
    /// Reconstruct inputs and emit anomaly heatmaps with the blaze stage.
    Detect(DetectArgs),
    /// Write the IS / cluster-LPIPS report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training images per category.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub categories: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 25)]
    pub heldout: usize,
    #[arg(long, default_value_t = 25)]
    pub defects: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides the resolution of every stage schedule.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub stage: Stage,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Keep edge maps unmanipulated (all-zero masks).
    #[arg(long)]
    pub no_edit: bool,
    /// Number of manifest records to use (default: all).
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub count: Option<usize>,
    /// Treat the manifest's region labels as ground-truth defect masks and
    /// report pixel AUROC.
    #[arg(long)]
    pub gt: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Score the PNGs in this directory instead of generating fixed lists.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

/// 2 for usage and contract errors, 1 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Param(_) | Error::Protocol(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus(a) => cmd_build_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

/// Output layout under `--out`.
pub struct OutDirs {
    pub root: PathBuf,
}

impl OutDirs {
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{stage}.safetensors"))
    }

    pub fn loss_log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{stage}_loss.jsonl"))
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn samples(&self, kind: &str) -> PathBuf {
        self.root.join("samples").join(kind)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(r) = common.resolution {
        for s in [Stage::Boot, Stage::Flare, Stage::Blaze] {
            cfg.schedules.get_mut(s).resolution = r;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_of(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| {
        Error::Config("no manifest given (use --manifest or set `manifest` in the config)".into())
    })?;
    load_manifest(path)
}

fn persist_config(cfg: &RunConfig, dirs: &OutDirs, name: &str) -> Result<()> {
    cfg.save(&dirs.logs().join(format!("{name}.config.toml")))
}

/// Loads the checkpoint of `stage`; a missing file is a contract error
/// naming the stage that must be trained first.
pub fn require_checkpoint(dirs: &OutDirs, stage: Stage, needed_by: &str) -> Result<StageWeights> {
    let path = dirs.checkpoint(stage);
    if !path.exists() {
        return Err(Error::Contract(format!(
            "{needed_by} requires the {stage} checkpoint at {}; run `train --stage {stage}` first",
            path.display()
        )));
    }
    let w = StageWeights::load(&path, &Device::Cpu)?;
    w.expect_stage(stage)?;
    Ok(w)
}

fn take(samples: Vec<LoadedSample>, count: Option<usize>) -> Vec<LoadedSample> {
    match count {
        Some(n) => samples.into_iter().take(n).collect(),
        None => samples,
    }
}

pub fn cmd_build_corpus(a: &BuildCorpusArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        heldout_per_category: a.heldout,
        defects_per_category: a.defects,
        ..ToyCorpusSpec::new(a.n, a.categories, a.resolution, a.seed)
    };
    let corpus = build_toy_corpus_full(&a.out, &spec)?;
    println!(
        "wrote {} training, {} held-out and {} defect records to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        corpus.defects.len(),
        a.out.display()
    );
    Ok(())
}

fn train_options(cfg: &RunConfig, dirs: &OutDirs, stage: Stage) -> TrainOptions {
    TrainOptions {
        augment: cfg.augment.clone(),
        losses: cfg.losses.clone(),
        extractor: cfg.extractor.clone(),
        manipulation: cfg.manipulation.clone(),
        dtype: DType::F32,
        log_path: Some(dirs.loss_log(stage)),
        checkpoint_path: Some(dirs.checkpoint(stage)),
    }
}

fn describe(rec: Option<&LossRecord>) -> String {
    match rec {
        None => "no steps run".into(),
        Some(r) => {
            let mut s = format!(
                "step {} L_G {:.5} adv {:.5} D {:.5}",
                r.step, r.perceptual, r.adversarial, r.d_objective
            );
            if let Some(h) = r.heatmap {
                s += &format!(" heat {h:.5}");
            }
            s + &format!(" total {:.5}", r.total)
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.schedules.get_mut(a.stage).epochs = e;
    }
    let dirs = OutDirs {
        root: cfg.out_dir.clone(),
    };
    let schedule = cfg.schedules.get(a.stage).clone();
    let opts = train_options(&cfg, &dirs, a.stage);
    let teacher = match a.stage.teacher() {
        Some(t) => {
            let w = require_checkpoint(&dirs, t, &format!("train --stage {}", a.stage))?;
            if w.config != cfg.generator {
                return Err(Error::Contract(format!(
                    "{t} checkpoint architecture differs from the configured generator"
                )));
            }
            Some(w)
        }
        None => None,
    };
    let manifest = manifest_of(&cfg)?;
    persist_config(&cfg, &dirs, &format!("train_{}", a.stage))?;
    let out: StageOutcome = match (a.stage, teacher) {
        (Stage::Boot, _) => train_boot(&manifest, &schedule, &cfg.generator, cfg.seed, &opts)?,
        (Stage::Flare, Some(t)) => train_flare(&manifest, &schedule, &t, cfg.seed, &opts)?,
        (Stage::Blaze, Some(t)) => train_blaze(&manifest, &schedule, &t, cfg.seed, &opts)?,
        _ => unreachable!("flare and blaze always have a teacher"),
    };
    println!(
        "{}: {} steps; final {}",
        a.stage,
        out.history.len(),
        describe(out.history.last())
    );
    println!("checkpoint {}", dirs.checkpoint(a.stage).display());
    Ok(())
}

fn gray_to_rgb(h: &Heatmap) -> ImageTensor {
    ImageTensor::from_fn(h.height(), h.width(), |y, x, _| h.get(y, x, 0))
}

fn edge_to_rgb(e: &EdgeMap) -> ImageTensor {
    ImageTensor::from_fn(e.height(), e.width(), |y, x, _| e.get(y, x, 0))
}

/// Normal image with the selected region tinted red.
fn region_overlay(image: &ImageTensor, m: &RegionMask) -> ImageTensor {
    ImageTensor::from_fn(image.height(), image.width(), |y, x, c| {
        let v = image.get(y, x, c);
        if m.contains(y, x) {
            0.5 * v + if c == 0 { 0.5 } else { 0.0 }
        } else {
            v
        }
    })
}

/// Tiles rows of equally sized images with a 2-pixel white gutter.
pub fn contact_sheet(rows: &[Vec<ImageTensor>]) -> Result<ImageTensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Contract("contact sheet needs at least one tile".into()))?;
    let (h, w) = first.dims();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.iter().flatten().any(|t| t.dims() != (h, w)) {
        return Err(Error::Contract("contact sheet tiles differ in size".into()));
    }
    const GAP: usize = 2;
    let (sh, sw) = (rows.len() * (h + GAP) - GAP, cols * (w + GAP) - GAP);
    Ok(ImageTensor::from_fn(sh, sw, |y, x, c| {
        let (r, ty) = (y / (h + GAP), y % (h + GAP));
        let (k, tx) = (x / (w + GAP), x % (w + GAP));
        match rows[r].get(k) {
            Some(t) if ty < h && tx < w => t.get(ty, tx, c),
            _ => 1.0,
        }
    }))
}

const SHEET_ROWS: usize = 8;

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let dirs = OutDirs {
        root: cfg.out_dir.clone(),
    };
    let flare = require_checkpoint(&dirs, Stage::Flare, "generate")?;
    let manifest = manifest_of(&cfg)?;
    let res = cfg.schedules.flare.resolution;
    let pool = load_all(&manifest, res)?;
    let inputs = take(pool.clone(), a.count);
    let out = dirs.samples("generate");
    ensure_dir(&out)?;
    persist_config(&cfg, &dirs, "generate")?;
    let params = ManipulationParams {
        clean_fraction: 0.0,
        ..cfg.manipulation.clone()
    };
    let mut sheet = Vec::new();
    for (i, s) in inputs.iter().enumerate() {
        let spec = if a.no_edit {
            EditSpec::None
        } else {
            let donor = &pool[(i + 1) % pool.len()];
            sample_edit_spec(s, donor, &params, derive_seed(cfg.seed, &[0x6E4, i as u64]))?
        };
        let (edges, _) = crate::trainpipe::apply_edit_spec(&s.edge, &spec)?;
        let (image, fh, m) = generate_anomaly(
            &flare,
            &s.edge,
            &s.image,
            &spec,
            derive_seed(cfg.seed, &[0x6E5, i as u64]),
        )?;
        image.save_png(&out.join(format!("{i:04}_image.png")))?;
        fh.save_png(&out.join(format!("{i:04}_heatmap.png")))?;
        m.to_heatmap()
            .save_png(&out.join(format!("{i:04}_mask.png")))?;
        edges.save_png(&out.join(format!("{i:04}_edge.png")))?;
        if sheet.len() < SHEET_ROWS {
            sheet.push(vec![
                s.image.clone(),
                region_overlay(&s.image, &m),
                edge_to_rgb(&edges),
                image,
                gray_to_rgb(&fh),
            ]);
        }
    }
    if !sheet.is_empty() {
        contact_sheet(&sheet)?.save_png(&out.join("contact_sheet.png"))?;
    }
    println!("generated {} triples in {}", inputs.len(), out.display());
    Ok(())
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let dirs = OutDirs {
        root: cfg.out_dir.clone(),
    };
    let blaze = require_checkpoint(&dirs, Stage::Blaze, "detect")?;
    let manifest = manifest_of(&cfg)?;
    let inputs = take(
        load_all(&manifest, cfg.schedules.blaze.resolution)?,
        a.count,
    );
    let out = dirs.samples("detect");
    ensure_dir(&out)?;
    persist_config(&cfg, &dirs, "detect")?;
    let mut maps = Vec::with_capacity(inputs.len());
    for (i, s) in inputs.iter().enumerate() {
        let (recon, bh) = detect(&blaze, &s.edge, &s.image)?;
        recon.save_png(&out.join(format!("{i:04}_recon.png")))?;
        bh.save_png(&out.join(format!("{i:04}_heatmap.png")))?;
        maps.push(bh);
    }
    println!("detected {} inputs into {}", maps.len(), out.display());
    if a.gt {
        let masks: Vec<RegionMask> = inputs
            .iter()
            .map(|s| {
                let (h, w) = s.image.dims();
                s.regions
                    .iter()
                    .fold(RegionMask::empty(h, w), |acc, m| acc.union(m))
            })
            .collect();
        let auroc = pixel_auroc(&maps, &masks)?;
        ensure_dir(&dirs.reports())?;
        let json = serde_json::json!({ "pixel_auroc": auroc, "count": maps.len() });
        write_atomic(
            &dirs.reports().join("detect.json"),
            format!("{json}\n").as_bytes(),
        )?;
        println!("pixel AUROC {auroc:.4}");
    }
    Ok(())
}

fn load_png_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| ImageTensor::load_png(p)).collect()
}

fn score(
    report: &mut Report,
    name: &str,
    images: &[ImageTensor],
    classifier: &CentroidClassifier,
    fx: &FeatureExtractor,
    cfg: &RunConfig,
) -> Result<()> {
    let is = inception_score(images, classifier, cfg.eval.is_splits)?;
    let feats = unit_features(fx, images)?;
    let lpips = cluster_lpips_from_matrix(&distance_matrix(&feats), cfg.eval.n_groups)?;
    info!("{name}: IS {:.3} ± {:.3}, LPIPS {lpips:.4}", is.0, is.1);
    report.push(name, is, lpips);
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let dirs = OutDirs {
        root: cfg.out_dir.clone(),
    };
    let manifest = manifest_of(&cfg)?;
    let res = cfg.schedules.flare.resolution;
    let flare = match a.images {
        Some(_) => None,
        None => Some(require_checkpoint(&dirs, Stage::Flare, "evaluate")?),
    };
    ensure_dir(&dirs.reports())?;
    persist_config(&cfg, &dirs, "evaluate")?;
    let fx = FeatureExtractor::from_config(&cfg.extractor, DType::F64, &Device::Cpu)?;
    let normals = load_all(&manifest, res)?;
    let labels: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| {
            manifest
                .category_index(&r.category)
                .expect("category listed")
        })
        .collect();
    let images: Vec<ImageTensor> = normals.iter().map(|s| s.image.clone()).collect();
    let classifier = CentroidClassifier::fit(&fx, &images, &labels, manifest.categories.len())?;
    let mut report = Report::default();
    match (&a.images, flare) {
        (Some(dir), _) => {
            let imgs = load_png_dir(dir)?;
            if imgs.is_empty() {
                return Err(Error::Contract(format!(
                    "no PNG images in {}",
                    dir.display()
                )));
            }
            score(&mut report, "images", &imgs, &classifier, &fx, &cfg)?;
        }
        (None, Some(flare)) => {
            let params = ManipulationParams {
                clean_fraction: 0.0,
                ..cfg.manipulation.clone()
            };
            let lists = dirs.reports().join("eval_lists");
            for (k, cat) in manifest.categories.iter().enumerate() {
                let idx: Vec<usize> = (0..manifest.len()).filter(|&i| labels[i] == k).collect();
                let list = fixed_eval_list(
                    &manifest.subset(&idx),
                    cfg.eval.gen_list_size,
                    derive_seed(cfg.eval.fixed_seed, &[k as u64]),
                )?;
                list.absolutized()
                    .write(&lists.join(format!("{cat}.tsv")))?;
                let samples = load_all(&list, res)?;
                let pool: Vec<&LoadedSample> = idx.iter().map(|&i| &normals[i]).collect();
                let mut generated = Vec::with_capacity(samples.len());
                for (i, s) in samples.iter().enumerate() {
                    let donor = pool[(i + 1) % pool.len()];
                    let seed = derive_seed(cfg.eval.fixed_seed, &[k as u64, i as u64]);
                    let spec = sample_edit_spec(s, donor, &params, seed)?;
                    let (img, _, _) = generate_anomaly(
                        &flare,
                        &s.edge,
                        &s.image,
                        &spec,
                        derive_seed(seed, &[1]),
                    )?;
                    generated.push(img);
                }
                score(&mut report, cat, &generated, &classifier, &fx, &cfg)?;
            }
        }
        (None, None) => unreachable!("flare is loaded when no image directory is given"),
    }
    write_atomic(
        &dirs.reports().join("metrics.jsonl"),
        report.to_jsonl().as_bytes(),
    )?;
    let text = report.to_text();
    write_atomic(&dirs.reports().join("metrics.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
