//! Run configuration shared by every command. A persisted `RunConfig`
//! reproduces a run given the same code version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::evalmetrics::EvalProtocol;
use crate::fsutil::write_atomic;
use crate::losses::{ExtractorConfig, LossWeights};
use crate::netarch::{GeneratorConfig, Stage};
use crate::trainpipe::{LrDecay, ManipulationParams, OptimizerKind, StageSchedule};

/// Partial schedule; missing fields fall back to the stage defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleOverride {
    stage: Option<Stage>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    resolution: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<LrDecay>,
    optimizer: Option<OptimizerKind>,
    use_local_tps: Option<bool>,
    max_steps: Option<usize>,
}

impl ScheduleOverride {
    fn apply(self, stage: Stage) -> Result<StageSchedule> {
        if let Some(s) = self.stage {
            if s != stage {
                return Err(Error::Config(format!("schedule for {stage} is tagged {s}")));
            }
        }
        let d = StageSchedule::defaults(stage);
        Ok(StageSchedule {
            stage,
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            resolution: self.resolution.unwrap_or(d.resolution),
            lr: self.lr.unwrap_or(d.lr),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            use_local_tps: self.use_local_tps.unwrap_or(d.use_local_tps),
            max_steps: self.max_steps.or(d.max_steps),
        })
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSchedules {
    boot: ScheduleOverride,
    flare: ScheduleOverride,
    blaze: ScheduleOverride,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedules")]
pub struct Schedules {
    pub boot: StageSchedule,
    pub flare: StageSchedule,
    pub blaze: StageSchedule,
}

impl TryFrom<RawSchedules> for Schedules {
    type Error = Error;

    fn try_from(raw: RawSchedules) -> Result<Self> {
        Ok(Schedules {
            boot: raw.boot.apply(Stage::Boot)?,
            flare: raw.flare.apply(Stage::Flare)?,
            blaze: raw.blaze.apply(Stage::Blaze)?,
        })
    }
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules {
            boot: StageSchedule::defaults(Stage::Boot),
            flare: StageSchedule::defaults(Stage::Flare),
            blaze: StageSchedule::defaults(Stage::Blaze),
        }
    }
}

impl Schedules {
    pub fn get(&self, stage: Stage) -> &StageSchedule {
        match stage {
            Stage::Boot => &self.boot,
            Stage::Flare => &self.flare,
            Stage::Blaze => &self.blaze,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut StageSchedule {
        match stage {
            Stage::Boot => &mut self.boot,
            Stage::Flare => &mut self.flare,
            Stage::Blaze => &mut self.blaze,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub schedules: Schedules,
    pub generator: GeneratorConfig,
    pub augment: AugmentParams,
    pub losses: LossWeights,
    pub extractor: ExtractorConfig,
    pub manipulation: ManipulationParams,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            manifest: None,
            out_dir: PathBuf::from("runs/default"),
            schedules: Schedules::default(),
            generator: GeneratorConfig::default(),
            augment: AugmentParams::default(),
            losses: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            manipulation: ManipulationParams::default(),
            eval: EvalProtocol::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        for s in [Stage::Boot, Stage::Flare, Stage::Blaze] {
            let sched = self.schedules.get(s);
            sched.validate()?;
            self.generator
                .check_resolution(sched.resolution, sched.resolution)?;
        }
        self.generator.validate()?;
        self.augment.validate()?;
        self.losses.validate()?;
        self.manipulation.validate()?;
        self.eval.validate()?;
        if self.losses.perceptual_layer_weights.len() != self.extractor.taps.len() {
            return Err(Error::Config(format!(
                "{} perceptual layer weights for {} extractor taps",
                self.losses.perceptual_layer_weights.len(),
                self.extractor.taps.len()
            )));
        }
        Ok(())
    }
}
