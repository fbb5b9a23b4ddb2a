use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netarch::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    /// From `lr` at step 0 down to 0 after the last step.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub resolution: usize,
    pub lr: f64,
    #[serde(default = "linear")]
    pub lr_decay: LrDecay,
    #[serde(default = "adam")]
    pub optimizer: OptimizerKind,
    pub use_local_tps: bool,
    /// Caps the total number of optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn linear() -> LrDecay {
    LrDecay::Linear
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}

pub const ADAM_BETAS: (f64, f64) = (0.5, 0.999);

impl StageSchedule {
    pub fn defaults(stage: Stage) -> Self {
        match stage {
            Stage::Boot => StageSchedule {
                stage,
                epochs: 30,
                batch_size: 32,
                resolution: 256,
                lr: 2e-4,
                lr_decay: LrDecay::Linear,
                optimizer: OptimizerKind::Adam,
                use_local_tps: true,
                max_steps: None,
            },
            Stage::Flare | Stage::Blaze => StageSchedule {
                epochs: 5,
                use_local_tps: false,
                ..Self::defaults(Stage::Boot)
            }
            .with_stage(stage),
        }
    }

    fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, records: usize) -> usize {
        let n = self.epochs * self.steps_per_epoch(records);
        match self.max_steps {
            Some(cap) => n.min(cap),
            None => n,
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Linear => {
                if total == 0 {
                    self.lr
                } else {
                    self.lr * (1.0 - step as f64 / total as f64)
                }
            }
        }
    }
}
