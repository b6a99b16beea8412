use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
    Constant,
}

/// Per-epoch weight of the synthetic data: a start value `alpha` moving
/// towards 1 (increasing) or 0 (decreasing) at rate `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub direction: Direction,
    pub alpha: f64,
    pub beta: f64,
}

impl TrainingSchedule {
    pub fn new(direction: Direction, alpha: f64, beta: f64) -> Result<Self> {
        let s = Self {
            direction,
            alpha,
            beta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        Self::new(Direction::Constant, alpha, 0.0)
    }

    /// Regularizer default: decreasing from 1.0 at rate 0.05.
    pub fn regularizer_default() -> Self {
        Self {
            direction: Direction::Decreasing,
            alpha: 1.0,
            beta: 0.05,
        }
    }

    /// Mixup default: increasing from 0.5 at rate 0.05, so real-real pairs
    /// take over as training goes on.
    pub fn mixup_default() -> Self {
        Self {
            direction: Direction::Increasing,
            alpha: 0.5,
            beta: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("schedule alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("schedule beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }

    pub fn sigma(&self, epoch: usize) -> f64 {
        sigma_schedule(epoch as f64, self)
    }
}

/// `σ↑ = α + (1 − α)(1 − e^{−βε})`, `σ↓ = α·e^{−βε}`, or `α` when constant.
pub fn sigma_schedule(epoch: f64, schedule: &TrainingSchedule) -> f64 {
    let TrainingSchedule {
        direction,
        alpha,
        beta,
    } = *schedule;
    let decay = (-beta * epoch).exp();
    let sigma = match direction {
        Direction::Increasing => alpha + (1.0 - alpha) * (1.0 - decay),
        Direction::Decreasing => alpha * decay,
        Direction::Constant => alpha,
    };
    sigma.clamp(0.0, 1.0)
}

/// `L_real + σ·L_gen` for scalar loss tensors.
pub fn regularized_loss(loss_real: &Tensor, loss_gen: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("sigma {sigma} outside [0, 1]")));
    }
    for (what, t) in [("real loss", loss_real), ("synthetic loss", loss_gen)] {
        if !t.double_value(&[]).is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
    }
    Ok(loss_real + loss_gen * sigma)
}
