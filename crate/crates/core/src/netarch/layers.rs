use candle_core::{Tensor, D};

use super::kernels::{upsample_nearest2x, Conv};

use super::params::{Init, ParamStore};
use crate::error::Result;

pub(crate) const INIT_STD: f64 = 0.02;

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv> {
    let w = store.get_or_init(
        &format!("{name}.weight"),
        &[cout, cin, kernel, kernel],
        Init::Normal(INIT_STD),
    )?;
    let b = if bias {
        Some(store.get_or_init(&format!("{name}.bias"), &[cout], Init::Zeros)?)
    } else {
        None
    };
    Ok(Conv {
        weight: w,
        bias: b,
        stride,
        pad: padding,
    })
}

/// Hidden activations are smooth so the network is differentiable everywhere.
pub(crate) fn activation(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

/// `slope * x + (1 - slope) * gelu(x)`: leaky for negative inputs, smooth.
pub(crate) fn leaky_activation(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(((x * slope)? + (x.gelu()? * (1.0 - slope))?)?)
}

/// Per-sample, per-channel normalization without affine parameters.
pub(crate) fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// conv -> instance norm -> gelu
pub(crate) struct ConvBlock {
    conv: Conv,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        // Bias is redundant in front of instance norm.
        Ok(ConvBlock {
            conv: conv(store, name, cin, cout, 3, stride, 1, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        activation(&instance_norm(&self.conv.forward(x)?)?)
    }
}

pub(crate) struct ResnetBlock {
    a: Conv,
    b: Conv,
}

impl ResnetBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(ResnetBlock {
            a: conv(
                store,
                &format!("{name}.a"),
                channels,
                channels,
                3,
                1,
                1,
                false,
            )?,
            b: conv(
                store,
                &format!("{name}.b"),
                channels,
                channels,
                3,
                1,
                1,
                false,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = activation(&instance_norm(&self.a.forward(x)?)?)?;
        let y = instance_norm(&self.b.forward(&y)?)?;
        Ok((x + y)?)
    }
}

/// nearest x2 upsample -> conv block
pub(crate) struct UpBlock {
    block: ConvBlock,
}

impl UpBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(UpBlock {
            block: ConvBlock::new(store, name, cin, cout, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.block.forward(&upsample_nearest2x(x)?)
    }
}
