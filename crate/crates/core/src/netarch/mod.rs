//! The unified generator, the conditional multi-scale discriminator, fusion,
//! and stage checkpoints.

mod config;
pub mod convert;
mod discriminator;
mod generator;
mod kernels;
mod layers;
mod params;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use config::{DiscriminatorConfig, GeneratorConfig, HeatmapActivation};
pub use discriminator::MultiScaleDiscriminator;
pub use generator::{Generator, GeneratorOutput};
pub use kernels::Conv;
pub use params::{Init, ParamStore};

use crate::error::{Error, Result};
use crate::raster::{EdgeMap, Heatmap, ImageTensor, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Boot,
    Flare,
    Blaze,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Boot => "boot",
            Stage::Flare => "flare",
            Stage::Blaze => "blaze",
        }
    }

    /// The stage whose weights this stage is trained from.
    pub fn teacher(self) -> Option<Stage> {
        match self {
            Stage::Boot => None,
            Stage::Flare => Some(Stage::Boot),
            Stage::Blaze => Some(Stage::Flare),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boot" => Ok(Stage::Boot),
            "flare" => Ok(Stage::Flare),
            "blaze" => Ok(Stage::Blaze),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// `i_in * (1 - h) + t * h` with `h` broadcast over channels.
pub fn fuse(i_in: &ImageTensor, t: &ImageTensor, h: &Heatmap) -> Result<ImageTensor> {
    if i_in.dims() != t.dims() || i_in.dims() != h.dims() {
        return Err(Error::Contract(format!(
            "fuse shapes differ: input {:?}, texture {:?}, heatmap {:?}",
            i_in.dims(),
            t.dims(),
            h.dims()
        )));
    }
    let (rows, cols) = i_in.dims();
    let r = Raster::from_fn(rows, cols, 3, |y, x, c| {
        let w = h.get(y, x, 0);
        i_in.get(y, x, c) * (1.0 - w) + t.get(y, x, c) * w
    });
    ImageTensor::from_raster(r)
}

/// Tensor form of [`fuse`]: `i_in` and `t` are (N,3,H,W), `h` is (N,1,H,W).
pub fn fuse_tensors(i_in: &Tensor, t: &Tensor, h: &Tensor) -> Result<Tensor> {
    let keep = h.affine(-1.0, 1.0)?;
    Ok((i_in.broadcast_mul(&keep)? + t.broadcast_mul(h)?)?)
}

/// Parameters of one generator/discriminator pair, tagged with its stage.
#[derive(Clone, Debug)]
pub struct StageWeights {
    pub generator_params: ParamStore,
    pub discriminator_params: ParamStore,
    pub stage: Stage,
    pub config: GeneratorConfig,
}

const FORMAT_TAG: &str = "edgeforge-stage-weights/1";

impl StageWeights {
    pub fn init(
        config: &GeneratorConfig,
        stage: Stage,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let mut g = ParamStore::new(seed, dtype, device);
        Generator::new(&mut g, config)?;
        g.seal();
        let mut d = ParamStore::new(seed ^ 0x9e37_79b9_7f4a_7c15, dtype, device);
        MultiScaleDiscriminator::new(&mut d, &config.discriminator)?;
        d.seal();
        Ok(StageWeights {
            generator_params: g,
            discriminator_params: d,
            stage,
            config: config.clone(),
        })
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::new(&mut self.generator_params.sealed_view(), &self.config)
    }

    pub fn discriminator(&self) -> Result<MultiScaleDiscriminator> {
        MultiScaleDiscriminator::new(
            &mut self.discriminator_params.sealed_view(),
            &self.config.discriminator,
        )
    }

    pub fn dtype(&self) -> DType {
        self.generator_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.generator_params.device()
    }

    /// Parameter names and shapes of both networks.
    pub fn architecture_signature(&self) -> Vec<(String, Vec<usize>)> {
        let g = self
            .generator_params
            .shapes()
            .into_iter()
            .map(|(k, s)| (format!("generator.{k}"), s));
        let d = self
            .discriminator_params
            .shapes()
            .into_iter()
            .map(|(k, s)| (format!("discriminator.{k}"), s));
        g.chain(d).collect()
    }

    /// Independent copy of the weights carrying a new stage tag.
    pub fn promote(&self, stage: Stage) -> Result<StageWeights> {
        Ok(StageWeights {
            generator_params: self.generator_params.deep_clone()?,
            discriminator_params: self.discriminator_params.deep_clone()?,
            stage,
            config: self.config.clone(),
        })
    }

    pub fn fingerprint(&self) -> Result<u64> {
        Ok(self.generator_params.fingerprint()?
            ^ self.discriminator_params.fingerprint()?.rotate_left(1))
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Contract(format!(
                "expected {stage} weights, got {} weights",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn expect_same_architecture(&self, other: &StageWeights) -> Result<()> {
        if self.config != other.config
            || self.architecture_signature() != other.architecture_signature()
        {
            return Err(Error::Contract(format!(
                "architecture mismatch between {} and {} weights",
                self.stage, other.stage
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, t) in self.generator_params.tensors() {
            tensors.insert(format!("generator.{k}"), t.to_dtype(DType::F32)?);
        }
        for (k, t) in self.discriminator_params.tensors() {
            tensors.insert(format!("discriminator.{k}"), t.to_dtype(DType::F32)?);
        }
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let meta = HashMap::from([
            ("format".to_string(), FORMAT_TAG.to_string()),
            ("stage".to_string(), self.stage.to_string()),
            ("config".to_string(), config),
        ]);
        safetensors::serialize(tensors.iter(), Some(meta))
            .map_err(|e| Error::Contract(format!("checkpoint serialization: {e}")))
    }

    /// Writes a single checkpoint file (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            msg,
        };
        let (_, meta) =
            safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let info = meta
            .metadata()
            .as_ref()
            .ok_or_else(|| bad("missing metadata".into()))?;
        if info.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(bad("not a stage checkpoint".into()));
        }
        let stage: Stage = info
            .get("stage")
            .ok_or_else(|| bad("missing stage tag".into()))?
            .parse()?;
        let config: GeneratorConfig = serde_json::from_str(
            info.get("config")
                .ok_or_else(|| bad("missing config".into()))?,
        )
        .map_err(|e| bad(format!("config: {e}")))?;
        let weights = StageWeights::init(&config, stage, 0, DType::F32, device)?;
        let all = candle_core::safetensors::load_buffer(bytes, device)?;
        let mut g = BTreeMap::new();
        let mut d = BTreeMap::new();
        for (k, t) in all {
            if let Some(rest) = k.strip_prefix("generator.") {
                g.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("discriminator.") {
                d.insert(rest.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor {k}")));
            }
        }
        let mut weights = weights;
        weights
            .generator_params
            .load(&g)
            .map_err(|e| bad(e.to_string()))?;
        weights
            .discriminator_params
            .load(&d)
            .map_err(|e| bad(e.to_string()))?;
        Ok(weights)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device, path)
    }
}

/// Single-sample generator pass on rasters: `(T, H, I_out)`.
pub fn generator_forward(
    edge: &EdgeMap,
    reference: &ImageTensor,
    noise_seed: Option<u64>,
    weights: &StageWeights,
) -> Result<(ImageTensor, Heatmap, ImageTensor)> {
    if edge.dims() != reference.dims() {
        return Err(Error::Contract("edge and reference are not aligned".into()));
    }
    let (h, w) = reference.dims();
    weights.config.check_resolution(h, w)?;
    let dev = weights.device();
    let e = convert::edges_to_tensor(&[edge], weights.dtype(), dev)?;
    let r = convert::images_to_tensor(&[reference], weights.dtype(), dev)?;
    let out = weights.generator()?.forward(&e, &r, noise_seed)?;
    let t = convert::tensor_to_images(&out.texture)?.remove(0);
    let hm = convert::tensor_to_heatmaps(&out.heatmap)?.remove(0);
    let fused = convert::tensor_to_images(&out.fused)?.remove(0);
    Ok((t, hm, fused))
}

/// Patch logits per discriminator scale for one `(edge, reference, candidate)`.
pub fn discriminator_forward(
    edge: &EdgeMap,
    reference: &ImageTensor,
    candidate: &ImageTensor,
    weights: &StageWeights,
) -> Result<Vec<Tensor>> {
    if edge.dims() != reference.dims() || candidate.dims() != reference.dims() {
        return Err(Error::Contract(
            "discriminator inputs are not aligned".into(),
        ));
    }
    let dev = weights.device();
    let e = convert::edges_to_tensor(&[edge], weights.dtype(), dev)?;
    let r = convert::images_to_tensor(&[reference], weights.dtype(), dev)?;
    let c = convert::images_to_tensor(&[candidate], weights.dtype(), dev)?;
    weights.discriminator()?.forward(&e, &r, &c)
}
