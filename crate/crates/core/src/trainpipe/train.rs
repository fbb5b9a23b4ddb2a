use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use super::manip::{apply_edit_spec, sample_batch_edits, ManipulationParams};
use super::schedule::{StageSchedule, ADAM_BETAS};
use crate::augment::{build_boot_triplet, AugmentParams};
use crate::edgeops::build_extractor;
use crate::error::{Error, Result};
use crate::fsutil::ensure_dir;
use crate::losses::{
    d_objective, g_objective, heatmap_loss_tensor, perceptual_loss_tensor, scalar, total_loss,
    ExtractorConfig, FeatureExtractor, LossWeights, StageLosses,
};
use crate::manifest::{load_sample, DatasetManifest, LoadedSample};
use crate::netarch::convert::{
    edges_to_tensor, heatmaps_to_tensor, images_to_tensor, tensor_to_images,
};
use crate::netarch::{Generator, GeneratorConfig, MultiScaleDiscriminator, Stage, StageWeights};
use crate::raster::{EdgeMap, ImageTensor};

/// Everything a stage needs besides its schedule, teacher and seed.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub augment: AugmentParams,
    pub losses: LossWeights,
    pub extractor: ExtractorConfig,
    pub manipulation: ManipulationParams,
    pub dtype: DType,
    /// Line-delimited loss records are written here when set.
    pub log_path: Option<PathBuf>,
    /// Final weights are saved here when set; an aborted run saves next to it.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            augment: AugmentParams::default(),
            losses: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            manipulation: ManipulationParams::default(),
            dtype: DType::F32,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

/// One optimizer step's losses. `perceptual` is L_G, `adversarial` the
/// generator's non-saturating term and `d_objective` the discriminator
/// objective in maximization form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub d_objective: f64,
    pub heatmap: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub weights: StageWeights,
    pub history: Vec<LossRecord>,
}

pub fn load_all(manifest: &DatasetManifest, resolution: usize) -> Result<Vec<LoadedSample>> {
    manifest
        .records
        .iter()
        .map(|r| load_sample(manifest, r, resolution))
        .collect()
}

struct Batch {
    edge: Tensor,
    reference: Tensor,
    target: Tensor,
    heat_target: Option<Tensor>,
    noise_seed: Option<u64>,
}

struct LossLog {
    out: Option<BufWriter<File>>,
    history: Vec<LossRecord>,
}

impl LossLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    ensure_dir(dir)?;
                }
                Some(BufWriter::new(
                    File::create(p).map_err(|e| Error::io(p, e))?,
                ))
            }
            None => None,
        };
        Ok(LossLog {
            out,
            history: Vec::new(),
        })
    }

    fn push(&mut self, rec: LossRecord, path: Option<&Path>) -> Result<()> {
        if let (Some(w), Some(p)) = (self.out.as_mut(), path) {
            let line = serde_json::to_string(&rec).expect("loss record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.history.push(rec);
        Ok(())
    }

    fn finish(mut self, path: Option<&Path>) -> Result<Vec<LossRecord>> {
        if let (Some(w), Some(p)) = (self.out.as_mut(), path) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(self.history)
    }
}

fn abort_path(p: &Path) -> PathBuf {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    p.with_file_name(format!("{name}.abort"))
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Shared GAN loop: per batch one discriminator step on the detached fake,
/// then one generator step on the stage total.
fn run_stage(
    weights: StageWeights,
    samples: &[LoadedSample],
    schedule: &StageSchedule,
    opts: &TrainOptions,
    seed: u64,
    mut make_batch: impl FnMut(usize, &[&LoadedSample]) -> Result<Batch>,
) -> Result<StageOutcome> {
    let stage = weights.stage;
    let total_steps = if samples.is_empty() {
        0
    } else {
        schedule.total_steps(samples.len())
    };
    let log_path = opts.log_path.as_deref();
    let mut log = LossLog::open(log_path)?;
    if total_steps > 0 {
        let fx = FeatureExtractor::from_config(&opts.extractor, weights.dtype(), weights.device())?;
        let g = weights.generator()?;
        let d = weights.discriminator()?;
        let mut opt_g = adam(weights.generator_params.vars(), schedule.lr)?;
        let mut opt_d = adam(weights.discriminator_params.vars(), schedule.lr)?;
        let mut step = 0;
        let mut epoch = 0u64;
        'epochs: loop {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[0xE90C, epoch],
            )));
            for chunk in order.chunks(schedule.batch_size) {
                if step == total_steps {
                    break 'epochs;
                }
                let lr = schedule.lr_at(step, total_steps);
                opt_g.set_learning_rate(lr);
                opt_d.set_learning_rate(lr);
                let members: Vec<&LoadedSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = make_batch(step, &members)?;
                let rec = gan_step(
                    step, stage, lr, &g, &d, &fx, &batch, opts, &mut opt_g, &mut opt_d,
                );
                let rec = match rec {
                    Ok(r) => r,
                    Err(e @ Error::Numerical(_)) => {
                        if let Some(p) = &opts.checkpoint_path {
                            let ap = abort_path(p);
                            weights.save(&ap)?;
                            warn!(
                                "{stage} step {step}: {e}; weights saved to {}",
                                ap.display()
                            );
                        }
                        let _ = log.finish(log_path);
                        return Err(Error::Numerical(format!(
                            "{stage} training aborted at step {step}: {e}"
                        )));
                    }
                    Err(e) => return Err(e),
                };
                if step % 50 == 0 || step + 1 == total_steps {
                    info!(
                        "{stage} step {step}/{total_steps} lr {lr:.2e} L_G {:.4} adv {:.4} D {:.4} heat {:?}",
                        rec.perceptual, rec.adversarial, rec.d_objective, rec.heatmap
                    );
                }
                log.push(rec, log_path)?;
                step += 1;
            }
            epoch += 1;
        }
    }
    let history = log.finish(log_path)?;
    if let Some(p) = &opts.checkpoint_path {
        weights.save(p)?;
    }
    Ok(StageOutcome { weights, history })
}

#[allow(clippy::too_many_arguments)]
fn gan_step(
    step: usize,
    stage: Stage,
    lr: f64,
    g: &Generator,
    d: &MultiScaleDiscriminator,
    fx: &FeatureExtractor,
    b: &Batch,
    opts: &TrainOptions,
    opt_g: &mut AdamW,
    opt_d: &mut AdamW,
) -> Result<LossRecord> {
    let out = g.forward(&b.edge, &b.reference, b.noise_seed)?;
    let real = d.forward(&b.edge, &b.reference, &b.target)?;
    let fake_detached = d.forward(&b.edge, &b.reference, &out.fused.detach())?;
    let d_obj = d_objective(&real, &fake_detached)?;
    let d_val = scalar(&d_obj)?;
    opt_d.backward_step(&d_obj.neg()?)?;

    let fake = d.forward(&b.edge, &b.reference, &out.fused)?;
    let parts = StageLosses {
        perceptual: perceptual_loss_tensor(&out.fused, &b.target, fx, &opts.losses)?,
        adversarial: g_objective(&fake)?,
        heatmap: b
            .heat_target
            .as_ref()
            .map(|t| heatmap_loss_tensor(&out.heatmap, t))
            .transpose()?,
    };
    let total = total_loss(stage, &parts, &opts.losses)?;
    let rec = LossRecord {
        step,
        stage,
        lr,
        perceptual: scalar(&parts.perceptual)?,
        adversarial: scalar(&parts.adversarial)?,
        d_objective: d_val,
        heatmap: parts.heatmap.as_ref().map(scalar).transpose()?,
        total: scalar(&total)?,
    };
    if !rec.total.is_finite() || !d_val.is_finite() {
        return Err(Error::Numerical(format!(
            "losses L_G={} adv={} D={} heat={:?}",
            rec.perceptual, rec.adversarial, d_val, rec.heatmap
        )));
    }
    opt_g.backward_step(&total)?;
    Ok(rec)
}

fn check_schedule(schedule: &StageSchedule, stage: Stage) -> Result<()> {
    schedule.validate()?;
    if schedule.stage != stage {
        return Err(Error::Contract(format!(
            "{} schedule passed to {stage} training",
            schedule.stage
        )));
    }
    Ok(())
}

fn tensors(
    edges: &[&EdgeMap],
    images: &[&ImageTensor],
    w: &StageWeights,
) -> Result<(Tensor, Tensor)> {
    Ok((
        edges_to_tensor(edges, w.dtype(), w.device())?,
        images_to_tensor(images, w.dtype(), w.device())?,
    ))
}

pub fn train_boot(
    manifest: &DatasetManifest,
    schedule: &StageSchedule,
    config: &GeneratorConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Boot)?;
    let weights = StageWeights::init(config, Stage::Boot, seed, opts.dtype, &Device::Cpu)?;
    let samples = load_all(manifest, schedule.resolution)?;
    train_boot_from(weights, &samples, schedule, seed, opts)
}

/// Boot training on preloaded samples, starting from `weights`.
pub fn train_boot_from(
    weights: StageWeights,
    samples: &[LoadedSample],
    schedule: &StageSchedule,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Boot)?;
    weights.expect_stage(Stage::Boot)?;
    let aug = AugmentParams {
        use_local_tps: schedule.use_local_tps,
        ..opts.augment.clone()
    };
    aug.validate()?;
    let w = weights.clone();
    run_stage(weights, samples, schedule, opts, seed, |step, members| {
        let trips = members
            .iter()
            .enumerate()
            .map(|(i, s)| {
                build_boot_triplet(
                    &s.edge,
                    &s.image,
                    &aug,
                    derive_seed(seed, &[0xB007, step as u64, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let e: Vec<&EdgeMap> = trips.iter().map(|t| &t.target_edge).collect();
        let r: Vec<&ImageTensor> = trips.iter().map(|t| &t.reference).collect();
        let t: Vec<&ImageTensor> = trips.iter().map(|t| &t.target).collect();
        let (edge, reference) = tensors(&e, &r, &w)?;
        Ok(Batch {
            edge,
            reference,
            target: images_to_tensor(&t, w.dtype(), w.device())?,
            heat_target: None,
            noise_seed: Some(derive_seed(seed, &[0x4015E, step as u64])),
        })
    })
}

/// Manipulated edges and masks for a batch.
fn manipulate(
    members: &[&LoadedSample],
    pool: &[LoadedSample],
    params: &ManipulationParams,
    seed: u64,
) -> Result<(Vec<EdgeMap>, Vec<crate::raster::RegionMask>)> {
    let specs = sample_batch_edits(members, pool, params, seed)?;
    let mut edges = Vec::with_capacity(members.len());
    let mut masks = Vec::with_capacity(members.len());
    for (s, spec) in members.iter().zip(&specs) {
        let (e, m) = apply_edit_spec(&s.edge, spec)?;
        edges.push(e);
        masks.push(m);
    }
    Ok((edges, masks))
}

fn check_teacher(teacher: &StageWeights, stage: Stage) -> Result<()> {
    teacher.expect_stage(stage.teacher().expect("stage has a teacher"))
}

pub fn train_flare(
    manifest: &DatasetManifest,
    schedule: &StageSchedule,
    boot: &StageWeights,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Flare)?;
    check_teacher(boot, Stage::Flare)?;
    let samples = load_all(manifest, schedule.resolution)?;
    train_flare_from(
        boot.promote(Stage::Flare)?,
        &samples,
        schedule,
        boot,
        seed,
        opts,
    )
}

/// Flare training from `weights` (normally the promoted boot weights), with
/// `boot` as the frozen teacher.
pub fn train_flare_from(
    weights: StageWeights,
    samples: &[LoadedSample],
    schedule: &StageSchedule,
    boot: &StageWeights,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Flare)?;
    check_teacher(boot, Stage::Flare)?;
    weights.expect_stage(Stage::Flare)?;
    weights.expect_same_architecture(boot)?;
    opts.manipulation.validate()?;
    let before = boot.fingerprint()?;
    let teacher = boot.generator()?;
    let w = weights.clone();
    let out = run_stage(weights, samples, schedule, opts, seed, |step, members| {
        let (edges, masks) = manipulate(
            members,
            samples,
            &opts.manipulation,
            derive_seed(seed, &[0xED17, step as u64]),
        )?;
        let e: Vec<&EdgeMap> = edges.iter().collect();
        let r: Vec<&ImageTensor> = members.iter().map(|s| &s.image).collect();
        let (edge, reference) = tensors(&e, &r, &w)?;
        let target = teacher
            .forward(
                &edge,
                &reference,
                Some(derive_seed(seed, &[0x7EAC, step as u64])),
            )?
            .fused
            .detach();
        let heat: Vec<crate::raster::Heatmap> = masks.iter().map(|m| m.to_heatmap()).collect();
        let heat: Vec<&crate::raster::Heatmap> = heat.iter().collect();
        Ok(Batch {
            edge,
            reference,
            target,
            heat_target: Some(heatmaps_to_tensor(&heat, w.dtype(), w.device())?),
            noise_seed: Some(derive_seed(seed, &[0x4015E, step as u64])),
        })
    })?;
    if boot.fingerprint()? != before {
        return Err(Error::Contract(
            "boot teacher weights changed during flare training".into(),
        ));
    }
    Ok(out)
}

pub fn train_blaze(
    manifest: &DatasetManifest,
    schedule: &StageSchedule,
    flare: &StageWeights,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Blaze)?;
    check_teacher(flare, Stage::Blaze)?;
    let samples = load_all(manifest, schedule.resolution)?;
    train_blaze_from(
        flare.promote(Stage::Blaze)?,
        &samples,
        schedule,
        flare,
        seed,
        opts,
    )
}

/// Blaze training from `weights`, with `flare` as the frozen teacher. The
/// input pair is (manipulated edges, flare anomaly image); targets are the
/// normal image and the flare heatmap.
pub fn train_blaze_from(
    weights: StageWeights,
    samples: &[LoadedSample],
    schedule: &StageSchedule,
    flare: &StageWeights,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    check_schedule(schedule, Stage::Blaze)?;
    check_teacher(flare, Stage::Blaze)?;
    weights.expect_stage(Stage::Blaze)?;
    weights.expect_same_architecture(flare)?;
    opts.manipulation.validate()?;
    let before = flare.fingerprint()?;
    let teacher = flare.generator()?;
    let recompute = match &opts.manipulation.blaze_recompute_edges {
        Some(cfg) => Some(build_extractor(cfg)?),
        None => None,
    };
    let w = weights.clone();
    let out = run_stage(weights, samples, schedule, opts, seed, |step, members| {
        let (edges, _) = manipulate(
            members,
            samples,
            &opts.manipulation,
            derive_seed(seed, &[0xED17, step as u64]),
        )?;
        let e: Vec<&EdgeMap> = edges.iter().collect();
        let r: Vec<&ImageTensor> = members.iter().map(|s| &s.image).collect();
        let (edge, normal) = tensors(&e, &r, &w)?;
        let fake = teacher.forward(
            &edge,
            &normal,
            Some(derive_seed(seed, &[0x7EAC, step as u64])),
        )?;
        let edge = match &recompute {
            None => edge,
            Some(ex) => {
                let fresh: Vec<EdgeMap> = tensor_to_images(&fake.fused)?
                    .iter()
                    .map(|img| ex.extract(img))
                    .collect();
                edges_to_tensor(&fresh.iter().collect::<Vec<_>>(), w.dtype(), w.device())?
            }
        };
        Ok(Batch {
            edge,
            reference: fake.fused.detach(),
            target: normal,
            heat_target: Some(fake.heatmap.detach()),
            noise_seed: None,
        })
    })?;
    if flare.fingerprint()? != before {
        return Err(Error::Contract(
            "flare teacher weights changed during blaze training".into(),
        ));
    }
    Ok(out)
}
