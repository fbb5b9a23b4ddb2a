//! Autodiff against central finite differences for every loss term in f64.
//!
//! The perceptual distance is L1, so it has kinks wherever a generated
//! feature equals its target. A central difference whose interval straddles
//! a kink does not estimate the derivative; such coordinates are detected
//! exactly (an L1 argument changes sign between `x - h` and `x + h`) and
//! redrawn. Tolerance and step are unchanged.

use candle_core::{DType, Device, Tensor, Var};
use edgeforge::losses::{
    d_objective, g_objective, heatmap_loss_tensor, perceptual_loss_tensor, total_loss,
    ExtractorConfig, FeatureExtractor, LossWeights, StageLosses,
};
use edgeforge::netarch::{DiscriminatorConfig, GeneratorConfig, Stage, StageWeights};
use edgeforge::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 8;
pub const SAMPLES: usize = 10;
pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Below this both derivatives count as zero (e.g. biases in front of an
/// instance norm, whose true gradient is exactly zero).
pub const ABS_FLOOR: f64 = 1e-8;

/// Redraw budget per requested sample.
const MAX_DRAWS: usize = 50;

pub struct GradCheck {
    pub term: &'static str,
    pub worst_rel: f64,
    pub pairs: Vec<(f64, f64)>,
    /// Coordinates redrawn because their interval straddles an L1 kink.
    pub straddling: usize,
    pub pass: bool,
}

fn config() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        num_scales: 2,
        num_resblocks: 1,
        noise_dim: 4,
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            num_scales: 1,
            num_layers: 2,
        },
        ..GeneratorConfig::default()
    }
}

struct Inputs {
    edge: Tensor,
    reference: Tensor,
    target: Tensor,
    heat: Tensor,
}

fn inputs(seed: u64) -> Result<Inputs> {
    inputs_sized(seed, SIZE)
}

fn inputs_sized(seed: u64, n: usize) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |c: usize| -> Result<Tensor> {
        let v: Vec<f64> = (0..2 * c * n * n).map(|_| rng.random()).collect();
        Ok(Tensor::from_vec(v, (2, c, n, n), &Device::Cpu)?)
    };
    let edge = t(1)?.ge(0.7)?.to_dtype(DType::F64)?;
    let heat = t(1)?.ge(0.5)?.to_dtype(DType::F64)?;
    Ok(Inputs {
        edge,
        reference: t(3)?,
        target: t(3)?,
        heat,
    })
}

fn read(var: &Var, i: usize) -> Result<f64> {
    Ok(var.as_tensor().flatten_all()?.to_vec1::<f64>()?[i])
}

fn write(var: &Var, i: usize, value: f64) -> Result<()> {
    let mut v = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.as_tensor().shape(), &Device::Cpu)?)?;
    Ok(())
}

fn no_kinks() -> Result<Vec<f64>> {
    Ok(Vec::new())
}

/// Arguments of the absolute values inside the perceptual loss.
fn perceptual_args(generated: &Tensor, target: &Tensor, fx: &FeatureExtractor) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (a, b) in fx.features(generated)?.iter().zip(fx.features(target)?) {
        out.extend((a - b)?.flatten_all()?.to_vec1::<f64>()?);
    }
    Ok(out)
}

fn same_signs(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (*x > 0.0) == (*y > 0.0) && (*x < 0.0) == (*y < 0.0))
}

/// Compares d loss / d theta for `SAMPLES` entries drawn from the variables
/// that the loss actually depends on. `kinks` returns the arguments of every
/// absolute value in the loss.
fn check(
    term: &'static str,
    vars: Vec<Var>,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
    kinks: impl Fn() -> Result<Vec<f64>>,
) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let mut live: Vec<(Var, Vec<f64>)> = Vec::new();
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let g = g.flatten_all()?.to_vec1::<f64>()?;
            if g.iter().any(|x| x.abs() > ABS_FLOOR) {
                live.push((v, g));
            }
        }
    }
    assert!(!live.is_empty(), "{term}: no parameter receives gradient");
    let total: usize = live.iter().map(|(_, g)| g.len()).sum();
    let centre = kinks()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut straddling = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES * MAX_DRAWS {
        if pairs.len() == SAMPLES {
            break;
        }
        let mut k = rng.random_range(0..total);
        let (var, g) = live
            .iter()
            .find(|(_, g)| {
                if k < g.len() {
                    true
                } else {
                    k -= g.len();
                    false
                }
            })
            .expect("index in range");
        let x0 = read(var, k)?;
        write(var, k, x0 + STEP)?;
        let up = loss()?.to_scalar::<f64>()?;
        let up_kinks = kinks()?;
        write(var, k, x0 - STEP)?;
        let down = loss()?.to_scalar::<f64>()?;
        let down_kinks = kinks()?;
        write(var, k, x0)?;
        if !same_signs(&centre, &up_kinks) || !same_signs(&centre, &down_kinks) {
            straddling += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = g[k];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale <= ABS_FLOOR {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(rel);
        pairs.push((analytic, numeric));
    }
    let pass = worst <= REL_TOL && pairs.len() == SAMPLES;
    Ok(GradCheck {
        term,
        worst_rel: worst,
        pairs,
        straddling,
        pass,
    })
}

/// Criterion form: each loss differentiated with respect to its own inputs
/// (generated image, heatmap) or, for the discriminator objective, the
/// discriminator parameters.
pub fn run_all() -> Result<Vec<GradCheck>> {
    let w = StageWeights::init(&config(), Stage::Flare, 11, DType::F64, &Device::Cpu)?;
    let d = w.discriminator()?;
    let fx = FeatureExtractor::from_config(&ExtractorConfig::default(), DType::F64, &Device::Cpu)?;
    let lw = LossWeights::default();
    let x = inputs(3)?;
    let gen = Var::from_tensor(&inputs(4)?.target)?;
    let heat = Var::from_tensor(&((inputs(5)?.target.narrow(1, 0, 1)? * 0.9)? + 0.05)?)?;

    let gen_kinks = || perceptual_args(gen.as_tensor(), &x.target, &fx);
    let mut out = vec![check(
        "perceptual",
        vec![gen.clone()],
        1,
        || perceptual_loss_tensor(gen.as_tensor(), &x.target, &fx, &lw),
        gen_kinks,
    )?];
    out.push(check(
        "adversarial (generator)",
        vec![gen.clone()],
        2,
        || g_objective(&d.forward(&x.edge, &x.reference, gen.as_tensor())?),
        no_kinks,
    )?);
    out.push(check(
        "adversarial (discriminator)",
        w.discriminator_params.vars(),
        3,
        || {
            d_objective(
                &d.forward(&x.edge, &x.reference, &x.target)?,
                &d.forward(&x.edge, &x.reference, &gen.as_tensor().detach())?,
            )
        },
        no_kinks,
    )?);
    out.push(check(
        "heatmap",
        vec![heat.clone()],
        4,
        || heatmap_loss_tensor(heat.as_tensor(), &x.heat),
        no_kinks,
    )?);
    for (name, stage, seed) in [
        ("total (flare)", Stage::Flare, 5),
        ("total (blaze)", Stage::Blaze, 6),
    ] {
        out.push(check(
            name,
            vec![gen.clone(), heat.clone()],
            seed,
            || {
                let parts = StageLosses {
                    perceptual: perceptual_loss_tensor(gen.as_tensor(), &x.target, &fx, &lw)?,
                    adversarial: g_objective(&d.forward(
                        &x.edge,
                        &x.reference,
                        gen.as_tensor(),
                    )?)?,
                    heatmap: Some(heatmap_loss_tensor(heat.as_tensor(), &x.heat)?),
                };
                total_loss(stage, &parts, &lw)
            },
            gen_kinks,
        )?);
    }
    Ok(out)
}

/// End-to-end form: flare total loss differentiated with respect to sampled
/// generator parameters at `size` x `size`.
pub fn run_network(size: usize, seed: u64) -> Result<GradCheck> {
    let w = StageWeights::init(&config(), Stage::Flare, 11, DType::F64, &Device::Cpu)?;
    let g = w.generator()?;
    let d = w.discriminator()?;
    let fx = FeatureExtractor::from_config(&ExtractorConfig::default(), DType::F64, &Device::Cpu)?;
    let lw = LossWeights::default();
    let x = inputs_sized(seed, size)?;
    check(
        "total (flare) w.r.t. parameters",
        w.generator_params.vars(),
        seed,
        || {
            let o = g.forward(&x.edge, &x.reference, None)?;
            let parts = StageLosses {
                perceptual: perceptual_loss_tensor(&o.fused, &x.target, &fx, &lw)?,
                adversarial: g_objective(&d.forward(&x.edge, &x.reference, &o.fused)?)?,
                heatmap: Some(heatmap_loss_tensor(&o.heatmap, &x.heat)?),
            };
            total_loss(Stage::Flare, &parts, &lw)
        },
        || {
            let o = g.forward(&x.edge, &x.reference, None)?;
            perceptual_args(&o.fused, &x.target, &fx)
        },
    )
}

/// Flare adversarial plus heatmap terms w.r.t. generator parameters. These
/// are smooth everywhere, unlike the L1 perceptual distance.
pub fn run_network_smooth(size: usize, seed: u64) -> Result<GradCheck> {
    let w = StageWeights::init(&config(), Stage::Flare, 11, DType::F64, &Device::Cpu)?;
    let g = w.generator()?;
    let d = w.discriminator()?;
    let lw = LossWeights::default();
    let x = inputs_sized(seed, size)?;
    check(
        "adversarial + heatmap w.r.t. parameters",
        w.generator_params.vars(),
        seed,
        || {
            let o = g.forward(&x.edge, &x.reference, None)?;
            let adv = g_objective(&d.forward(&x.edge, &x.reference, &o.fused)?)?;
            Ok((adv + (heatmap_loss_tensor(&o.heatmap, &x.heat)? * lw.w_fh)?)?)
        },
        no_kinks,
    )
}
