//! Image classification under four ways of combining real and synthetic
//! data: real only, synthetic pretraining then real fine-tuning, a scheduled
//! synthetic loss term, and mixup with synthetic partners.

mod eval;
pub mod mixup;
pub mod model;
pub mod schedule;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{epochs_to_threshold, evaluate, per_class_delta, EvalReport};
pub use mixup::{choose_mixup_source, mix_with, mixup_batch, Batch, LambdaSampler, MixupSource};
pub use model::{ClassifierArch, ClassifierCheckpoint, ClassifierMeta, ClassifierNet};
pub use schedule::{regularized_loss, sigma_schedule, Direction, TrainingSchedule};
pub use train::train_classifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Real,
    Pretrain,
    Regularizer,
    Mixup,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Real,
        Strategy::Pretrain,
        Strategy::Regularizer,
        Strategy::Mixup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Real => "real",
            Strategy::Pretrain => "pretrain",
            Strategy::Regularizer => "regularizer",
            Strategy::Mixup => "mixup",
        }
    }

    pub fn uses_synthetic(self) -> bool {
        self != Strategy::Real
    }

    pub fn default_schedule(self) -> Option<TrainingSchedule> {
        match self {
            Strategy::Regularizer => Some(TrainingSchedule::regularizer_default()),
            Strategy::Mixup => Some(TrainingSchedule::mixup_default()),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Where the initial weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InitSpec {
    #[default]
    Random,
    /// Random init, then every matching tensor loaded from this file.
    Pretrained { path: PathBuf },
}

/// Training settings shared by every strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub arch: ClassifierArch,
    pub optimizer: OptimizerSpec,
    pub init: InitSpec,
    /// Maximum epochs on real data (the fine-tuning phase for PRETRAIN).
    pub epochs: usize,
    /// Maximum epochs of synthetic pretraining.
    pub pretrain_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the synthetic set held out to detect the pretraining plateau.
    pub pretrain_holdout: f64,
    pub batch_size: usize,
    pub mixup_lambda: LambdaSampler,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            optimizer: OptimizerSpec::default(),
            init: InitSpec::Random,
            epochs: 60,
            pretrain_epochs: 60,
            patience: 5,
            pretrain_holdout: 0.1,
            batch_size: 32,
            mixup_lambda: LambdaSampler::Uniform,
            flip: true,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("classifier batch_size must be at least 2".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("classifier patience must be positive".into()));
        }
        if !(self.pretrain_holdout > 0.0 && self.pretrain_holdout < 1.0) {
            return Err(Error::Config("pretrain_holdout must lie in (0, 1)".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// σ schedule for REGULARIZER and MIXUP.
    pub schedule: Option<TrainingSchedule>,
    pub settings: TrainSettings,
}

impl StrategyConfig {
    /// `strategy` with its default schedule.
    pub fn new(strategy: Strategy, settings: TrainSettings) -> Self {
        Self {
            strategy,
            schedule: strategy.default_schedule(),
            settings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        match (self.strategy, &self.schedule) {
            (Strategy::Regularizer | Strategy::Mixup, None) => Err(Error::Config(format!(
                "{} needs a sigma schedule",
                self.strategy
            ))),
            (_, Some(s)) => s.validate(),
            _ => Ok(()),
        }?;
        let e = &self.settings;
        match self.strategy {
            Strategy::Pretrain if e.pretrain_epochs == 0 => {
                Err(Error::Config("pretrain needs at least one pretraining epoch".into()))
            }
            Strategy::Real | Strategy::Regularizer | Strategy::Mixup if e.epochs == 0 => {
                Err(Error::Config(format!("{} needs at least one epoch", self.strategy)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub phase: Phase,
    /// Epoch index within its phase.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub sigma: Option<f64>,
    pub loss: f64,
}
