use candle_core::Tensor;

use super::config::DiscriminatorConfig;
use super::kernels::{avg_pool2x, Conv};
use super::layers::{conv, instance_norm, leaky_activation};
use super::params::ParamStore;
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

/// PatchGAN-style discriminator for one scale.
struct PatchDiscriminator {
    first: Conv,
    mids: Vec<Conv>,
    last: Conv,
}

impl PatchDiscriminator {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DiscriminatorConfig,
        cin: usize,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        let first = conv(store, &format!("{name}.l0"), cin, c, 4, 2, 1, true)?;
        let mut mids = Vec::new();
        let mut ch = c;
        for i in 1..cfg.num_layers {
            let next = (ch * 2).min(c * 8);
            let stride = if i == 1 { 2 } else { 1 };
            mids.push(conv(
                store,
                &format!("{name}.l{i}"),
                ch,
                next,
                4,
                stride,
                1,
                false,
            )?);
            ch = next;
        }
        let last = conv(store, &format!("{name}.out"), ch, 1, 4, 1, 1, true)?;
        Ok(PatchDiscriminator { first, mids, last })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = leaky_activation(&self.first.forward(&fits(x)?)?, SLOPE)?;
        for m in &self.mids {
            y = leaky_activation(&instance_norm(&m.forward(&fits(&y)?)?)?, SLOPE)?;
        }
        Ok(self.last.forward(&fits(&y)?)?)
    }
}

/// 4x4 kernels with padding 1 need at least 2x2 inputs.
fn fits(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!(
            "input too small for the discriminator ({h}x{w} at some layer)"
        )));
    }
    Ok(x.clone())
}

/// Conditional multi-scale discriminator over `(edge, reference, candidate)`.
pub struct MultiScaleDiscriminator {
    scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new(store: &mut ParamStore, cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.num_scales == 0 || cfg.num_layers < 2 {
            return Err(Error::Config(
                "discriminator needs >= 1 scale and >= 2 layers".into(),
            ));
        }
        let scales = (0..cfg.num_scales)
            .map(|s| PatchDiscriminator::new(store, &format!("d{s}"), cfg, 7))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleDiscriminator { scales })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// One logit map per scale, finest first.
    pub fn forward(
        &self,
        edge: &Tensor,
        reference: &Tensor,
        candidate: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let (n, _, h, w) = candidate.dims4()?;
        if reference.dims4()? != (n, 3, h, w)
            || edge.dims4()? != (n, 1, h, w)
            || candidate.dim(1)? != 3
        {
            return Err(Error::Contract(format!(
                "discriminator inputs misaligned: edge {:?}, reference {:?}, candidate {:?}",
                edge.dims(),
                reference.dims(),
                candidate.dims()
            )));
        }
        let mut x = Tensor::cat(&[edge, reference, candidate], 1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                x = avg_pool2x(&x)?;
            }
            out.push(d.forward(&x)?);
        }
        Ok(out)
    }
}
