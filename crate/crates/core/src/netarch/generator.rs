use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::GeneratorConfig;
use super::kernels::Conv;
use super::layers::{conv, ConvBlock, ResnetBlock, UpBlock};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Outputs of one generator pass, all NCHW.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Texture image `T`, 3 channels in (0, 1).
    pub texture: Tensor,
    /// Fusion weights `H`, 1 channel in (0, 1).
    pub heatmap: Tensor,
    /// `reference * (1 - H) + T * H`
    pub fused: Tensor,
}

struct Decoder {
    ups: Vec<UpBlock>,
    head: Conv,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &GeneratorConfig,
        out_channels: usize,
    ) -> Result<Self> {
        let mut ups = Vec::new();
        for i in (1..=cfg.num_scales).rev() {
            ups.push(UpBlock::new(
                store,
                &format!("{name}.up{i}"),
                cfg.channels_at(i),
                cfg.channels_at(i - 1),
            )?);
        }
        let head = conv(
            store,
            &format!("{name}.head"),
            cfg.channels_at(0),
            out_channels,
            3,
            1,
            1,
            true,
        )?;
        Ok(Decoder { ups, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for up in &self.ups {
            y = up.forward(&y)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&y)?)?)
    }
}

/// Shared encoder with separate texture and heatmap decoders.
pub struct Generator {
    cfg: GeneratorConfig,
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    res: Vec<ResnetBlock>,
    texture: Decoder,
    heat: Decoder,
}

impl Generator {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBlock::new(store, "enc.stem", 4, cfg.channels_at(0), 1)?;
        let downs = (1..=cfg.num_scales)
            .map(|i| {
                ConvBlock::new(
                    store,
                    &format!("enc.down{i}"),
                    cfg.channels_at(i - 1),
                    cfg.channels_at(i),
                    2,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let res = (0..cfg.num_resblocks)
            .map(|i| ResnetBlock::new(store, &format!("enc.res{i}"), cfg.bottleneck_channels()))
            .collect::<Result<Vec<_>>>()?;
        let texture = Decoder::new(store, "tex", cfg, 3)?;
        let heat = Decoder::new(store, "heat", cfg, 1)?;
        Ok(Generator {
            cfg: cfg.clone(),
            stem,
            downs,
            res,
            texture,
            heat,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Deepest encoder features for `edge` (N,1,H,W) and `reference` (N,3,H,W).
    pub fn encode(&self, edge: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = reference.dims4()?;
        self.cfg.check_resolution(h, w)?;
        if edge.dims4()? != (reference.dim(0)?, 1, h, w) {
            return Err(Error::Contract(format!(
                "edge {:?} does not match reference {:?}",
                edge.dims(),
                reference.dims()
            )));
        }
        let x = Tensor::cat(&[edge, reference], 1)?;
        let mut y = self.stem.forward(&x)?;
        for d in &self.downs {
            y = d.forward(&y)?;
        }
        for r in &self.res {
            y = r.forward(&y)?;
        }
        Ok(y)
    }

    /// Adds seeded Gaussian noise to the first `noise_dim` feature channels,
    /// scaled by `noise_scale` times the (detached) feature std.
    pub fn inject_noise(&self, features: &Tensor, seed: u64) -> Result<Tensor> {
        let k = self.cfg.noise_dim;
        if k == 0 || self.cfg.noise_scale == 0.0 {
            return Ok(features.clone());
        }
        let (n, c, h, w) = features.dims4()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n * k * h * w)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let noise = Tensor::from_vec(values, (n, k, h, w), features.device())?
            .to_dtype(features.dtype())?;
        let vals = features
            .detach()
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        let noise = (noise * (self.cfg.noise_scale * sd))?;
        let noise = if k < c {
            let zeros = Tensor::zeros((n, c - k, h, w), features.dtype(), features.device())?;
            Tensor::cat(&[&noise, &zeros], 1)?
        } else {
            noise
        };
        Ok((features + noise)?)
    }

    pub fn forward(
        &self,
        edge: &Tensor,
        reference: &Tensor,
        noise_seed: Option<u64>,
    ) -> Result<GeneratorOutput> {
        let mut feats = self.encode(edge, reference)?;
        if let Some(seed) = noise_seed {
            feats = self.inject_noise(&feats, seed)?;
        }
        let texture = self.texture.forward(&feats)?;
        let heatmap = self.heat.forward(&feats)?;
        let fused = super::fuse_tensors(reference, &texture, &heatmap)?;
        Ok(GeneratorOutput {
            texture,
            heatmap,
            fused,
        })
    }
}
