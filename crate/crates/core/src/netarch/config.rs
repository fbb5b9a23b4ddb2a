use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapActivation {
    /// Logistic squashing into (0, 1).
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub num_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 32,
            num_scales: 2,
            num_layers: 3,
        }
    }
}

/// Architecture of the generator/discriminator pair shared by all stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Number of stride-2 encoder stages (and decoder upsamplings).
    pub num_scales: usize,
    pub num_resblocks: usize,
    /// Bottleneck channels that receive injected noise.
    pub noise_dim: usize,
    /// Noise amplitude relative to the bottleneck feature std.
    pub noise_scale: f64,
    /// Channel growth stops at `base_channels * max_channel_mult`.
    pub max_channel_mult: usize,
    pub heatmap_activation: HeatmapActivation,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 32,
            num_scales: 4,
            num_resblocks: 4,
            noise_dim: 32,
            noise_scale: 0.1,
            max_channel_mult: 8,
            heatmap_activation: HeatmapActivation::Sigmoid,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels * (1usize << scale).min(self.max_channel_mult.max(1))
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.num_scales)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 2 {
            return Err(Error::Config(format!(
                "num_scales must be >= 2, got {}",
                self.num_scales
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.noise_dim > self.bottleneck_channels() {
            return Err(Error::Config(format!(
                "noise_dim {} exceeds bottleneck channels {}",
                self.noise_dim,
                self.bottleneck_channels()
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.num_scales;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "resolution {height}x{width} is not divisible by 2^{} = {f}",
                self.num_scales
            )));
        }
        Ok(())
    }
}
