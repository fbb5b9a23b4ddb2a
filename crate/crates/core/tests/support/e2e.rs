//! Toy-scale end-to-end run: corpus, three stages, held-out checks.

use std::path::Path;

use candle_core::DType;
use edgeforge::evalmetrics::pixel_auroc;
use edgeforge::losses::heatmap_loss;
use edgeforge::manifest::LoadedSample;
use edgeforge::netarch::{DiscriminatorConfig, GeneratorConfig, Stage, StageWeights};
use edgeforge::trainpipe::{
    build_toy_corpus_full, derive_seed, detect, generate_anomaly, load_all, sample_edit_spec,
    train_blaze_from, train_boot_from, train_flare_from, EditSpec, LossRecord, ManipulationParams,
    StageSchedule, ToyCorpusSpec, TrainOptions,
};
use edgeforge::{Heatmap, RegionMask, Result};

pub const SEED: u64 = 20240607;
pub const RES: usize = 64;
pub const BOOT_STEPS: usize = 500;
pub const FLARE_STEPS: usize = 300;
pub const BLAZE_STEPS: usize = 300;
pub const SMOOTH: usize = 20;

pub fn desk_config() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 16,
        num_scales: 3,
        num_resblocks: 2,
        noise_dim: 16,
        discriminator: DiscriminatorConfig {
            base_channels: 16,
            num_scales: 2,
            num_layers: 3,
        },
        ..GeneratorConfig::default()
    }
}

pub fn schedule(stage: Stage, steps: usize) -> StageSchedule {
    StageSchedule {
        epochs: 1000,
        batch_size: 4,
        resolution: RES,
        max_steps: Some(steps),
        ..StageSchedule::defaults(stage)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2eResult {
    pub boot: Vec<LossRecord>,
    pub flare: Vec<LossRecord>,
    pub blaze: Vec<LossRecord>,
    pub lg_first: f64,
    pub lg_last: f64,
    pub fh_loss_start: f64,
    pub fh_loss_end: f64,
    pub auroc: f64,
    pub fh_clean: f64,
    pub fh_edited: f64,
    /// Mean FH on unedited held-out inputs before and after flare training.
    pub fh_clean_start: f64,
    /// Mean BH on the unedited held-out normals.
    pub bh_pristine: f64,
    /// Per-defect mean BH inside and outside the ground-truth region,
    /// averaged over defects.
    pub bh_inside: f64,
    pub bh_outside: f64,
}

/// Trailing moving average.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn decile_means(xs: &[f64]) -> (f64, f64) {
    let k = (xs.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&xs[..k]), mean(&xs[xs.len() - k..]))
}

fn mean_map(h: &Heatmap) -> f64 {
    h.data().iter().map(|&v| v as f64).sum::<f64>() / h.data().len() as f64
}

/// Held-out edit specs, fixed for the whole run.
fn heldout_edits(heldout: &[LoadedSample], pool: &[LoadedSample]) -> Result<Vec<EditSpec>> {
    let params = ManipulationParams {
        clean_fraction: 0.0,
        ..Default::default()
    };
    heldout
        .iter()
        .enumerate()
        .map(|(i, s)| {
            sample_edit_spec(
                s,
                &pool[i % pool.len()],
                &params,
                derive_seed(SEED, &[0xE7A1, i as u64]),
            )
        })
        .collect()
}

/// Mean heatmap loss and mean heatmap value over the held-out set.
fn flare_eval(
    flare: &StageWeights,
    heldout: &[LoadedSample],
    specs: &[EditSpec],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut level = 0.0;
    for (i, (s, spec)) in heldout.iter().zip(specs).enumerate() {
        let (_, fh, m) = generate_anomaly(
            flare,
            &s.edge,
            &s.image,
            spec,
            derive_seed(SEED, &[0xE7A2, i as u64]),
        )?;
        loss += heatmap_loss(&fh, &m)?;
        level += mean_map(&fh);
    }
    let n = heldout.len() as f64;
    Ok((loss / n, level / n))
}

pub fn run(dir: &Path) -> Result<E2eResult> {
    let corpus = build_toy_corpus_full(dir, &ToyCorpusSpec::new(100, 2, RES, SEED))?;
    let train = load_all(&corpus.train, RES)?;
    let heldout = load_all(&corpus.heldout, RES)?;
    let defects = load_all(&corpus.defects, RES)?;
    let config = desk_config();
    let opts = TrainOptions::default();

    let boot0 = StageWeights::init(
        &config,
        Stage::Boot,
        SEED,
        DType::F32,
        &candle_core::Device::Cpu,
    )?;
    let boot = train_boot_from(
        boot0,
        &train,
        &schedule(Stage::Boot, BOOT_STEPS),
        SEED,
        &opts,
    )?;
    let lg: Vec<f64> = boot.history.iter().map(|r| r.perceptual).collect();
    let (lg_first, lg_last) = decile_means(&smooth(&lg, SMOOTH));

    let specs = heldout_edits(&heldout, &train)?;
    let flare0 = boot.weights.promote(Stage::Flare)?;
    let (fh_loss_start, _) = flare_eval(&flare0, &heldout, &specs)?;
    let clean = vec![EditSpec::None; heldout.len()];
    let (_, fh_clean_start) = flare_eval(&flare0, &heldout, &clean)?;
    let flare = train_flare_from(
        flare0,
        &train,
        &schedule(Stage::Flare, FLARE_STEPS),
        &boot.weights,
        derive_seed(SEED, &[2]),
        &opts,
    )?;
    let (fh_loss_end, fh_edited) = flare_eval(&flare.weights, &heldout, &specs)?;
    let (_, fh_clean) = flare_eval(&flare.weights, &heldout, &clean)?;

    let blaze = train_blaze_from(
        flare.weights.promote(Stage::Blaze)?,
        &train,
        &schedule(Stage::Blaze, BLAZE_STEPS),
        &flare.weights,
        derive_seed(SEED, &[3]),
        &opts,
    )?;
    let mut maps = Vec::new();
    let mut masks: Vec<RegionMask> = Vec::new();
    let (mut bh_inside, mut bh_outside) = (0.0, 0.0);
    for d in &defects {
        let (_, bh) = detect(&blaze.weights, &d.edge, &d.image)?;
        let m = &d.regions[0];
        let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0, 0.0, 0);
        for y in 0..bh.height() {
            for x in 0..bh.width() {
                let v = bh.data()[y * bh.width() + x] as f64;
                if m.contains(y, x) {
                    sum_in += v;
                    n_in += 1;
                } else {
                    sum_out += v;
                    n_out += 1;
                }
            }
        }
        bh_inside += sum_in / n_in as f64;
        bh_outside += sum_out / n_out as f64;
        maps.push(bh);
        masks.push(m.clone());
    }
    bh_inside /= defects.len() as f64;
    bh_outside /= defects.len() as f64;
    let auroc = pixel_auroc(&maps, &masks)?;
    let mut bh_pristine = 0.0;
    for s in &heldout {
        bh_pristine += mean_map(&detect(&blaze.weights, &s.edge, &s.image)?.1);
    }
    bh_pristine /= heldout.len() as f64;
    Ok(E2eResult {
        boot: boot.history,
        flare: flare.history,
        blaze: blaze.history,
        lg_first,
        lg_last,
        fh_loss_start,
        fh_loss_end,
        auroc,
        fh_clean,
        fh_edited,
        fh_clean_start,
        bh_pristine,
        bh_inside,
        bh_outside,
    })
}
