//! Conditional GANs: label conditioning through class-conditional batch norm
//! with a data-to-data cross-entropy head, pose conditioning through
//! spatially-adaptive normalization. Both use hinge losses and a spectrally
//! normalized discriminator.

mod checkpoint;
pub mod layers;
pub mod losses;
pub mod model;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::pose::ConditioningMap;

pub use checkpoint::{GanCheckpoint, GanMeta, SCHEMA_VERSION};
pub use losses::{d2dce_loss, hinge_losses, D2dceParams};
pub use model::{ArchSpec, Discriminator, DiscriminatorOutput, Generator};
pub use train::{train_gan, GanLossReport, GanTrainConfig, GanTrainOutcome};
pub use train::read_losses;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    Label,
    Pose,
}

impl fmt::Display for GanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanMode::Label => "label",
            GanMode::Pose => "pose",
        })
    }
}

/// A standard-normal latent vector reproducible from its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f32>,
    pub seed: u64,
}

impl LatentCode {
    pub fn from_seed(seed: u64, z_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..z_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { values, seed }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn stack(codes: &[LatentCode]) -> Tensor {
        let dim = codes.first().map_or(0, LatentCode::dim) as i64;
        let flat: Vec<f32> = codes.iter().flat_map(|c| c.values.iter().copied()).collect();
        Tensor::from_slice(&flat).view([-1, dim])
    }
}

/// The condition for a single generated sample.
#[derive(Clone, Debug, PartialEq)]
pub enum GanCondition {
    Label(usize),
    Pose(ConditioningMap),
}

impl GanCondition {
    pub fn mode(&self) -> GanMode {
        match self {
            GanCondition::Label(_) => GanMode::Label,
            GanCondition::Pose(_) => GanMode::Pose,
        }
    }

    pub fn batch(conditions: &[GanCondition]) -> Result<Conditioning> {
        let first = conditions
            .first()
            .ok_or_else(|| Error::invalid("empty condition batch"))?;
        match first {
            GanCondition::Label(_) => {
                let labels = conditions
                    .iter()
                    .map(|c| match c {
                        GanCondition::Label(l) => Ok(*l as i64),
                        GanCondition::Pose(_) => Err(mixed()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioning::Labels(Tensor::from_slice(&labels)))
            }
            GanCondition::Pose(_) => {
                let maps = conditions
                    .iter()
                    .map(|c| match c {
                        GanCondition::Pose(m) => Ok(m.clone()),
                        GanCondition::Label(_) => Err(mixed()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioning::Maps(crate::pose::stack_maps(&maps)?))
            }
        }
    }
}

fn mixed() -> Error {
    Error::invalid("condition batch mixes label and pose conditions")
}

/// Batched conditioning: `N` int64 labels or `N × C × H × W` maps.
#[derive(Debug)]
pub enum Conditioning {
    Labels(Tensor),
    Maps(Tensor),
}

impl Conditioning {
    pub fn mode(&self) -> GanMode {
        match self {
            Conditioning::Labels(_) => GanMode::Label,
            Conditioning::Maps(_) => GanMode::Pose,
        }
    }

    pub fn labels(labels: &[usize]) -> Self {
        let v: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
        Conditioning::Labels(Tensor::from_slice(&v))
    }

    pub fn len(&self) -> i64 {
        match self {
            Conditioning::Labels(t) | Conditioning::Maps(t) => t.size()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_select(&self, index: &Tensor) -> Self {
        match self {
            Conditioning::Labels(t) => Conditioning::Labels(t.index_select(0, index)),
            Conditioning::Maps(t) => Conditioning::Maps(t.index_select(0, index)),
        }
    }

    pub(crate) fn check(&self, spec: &ArchSpec, batch: i64) -> Result<()> {
        if self.mode() != spec.mode {
            return Err(Error::ModeMismatch {
                expected: spec.mode.to_string(),
                got: self.mode().to_string(),
            });
        }
        match self {
            Conditioning::Labels(t) => {
                if t.size() != [batch] {
                    return Err(Error::shape("label batch", batch, format!("{:?}", t.size())));
                }
                if t.kind() != Kind::Int64 {
                    return Err(Error::invalid("labels must be int64"));
                }
                if batch > 0 {
                    let max = t.max().int64_value(&[]);
                    let min = t.min().int64_value(&[]);
                    if min < 0 || max >= spec.num_classes as i64 {
                        return Err(Error::invalid(format!(
                            "label outside [0, {})",
                            spec.num_classes
                        )));
                    }
                }
            }
            Conditioning::Maps(t) => {
                let side = spec.image_size as i64;
                let expected = [batch, spec.cond_channels as i64, side, side];
                if t.size() != expected {
                    return Err(Error::shape(
                        "conditioning maps",
                        format!("{expected:?}"),
                        format!("{:?}", t.size()),
                    ));
                }
            }
        }
        Ok(())
    }
}
