use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Cluster parameters frozen, halving learning rate.
    One,
    /// Everything trainable at a constant rate.
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub step1_lr: f64,
    pub halve_every: u64,
    pub step1_iterations: u64,
    pub step2_lr: f64,
    pub step2_iterations: u64,
    pub batch_size: usize,
    pub flip_probability: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            step1_lr: 0.003,
            halve_every: 1000,
            step1_iterations: 50_000,
            step2_lr: 1e-4,
            step2_iterations: 10_000,
            batch_size: 15,
            flip_probability: 0.5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step1_lr > 0.0) || !(self.step2_lr > 0.0) || self.halve_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }

    /// Learning rate at `iteration` (counted from 0 within the phase).
    pub fn lr(&self, phase: Phase, iteration: u64) -> f64 {
        match phase {
            Phase::One => {
                let halvings = (iteration / self.halve_every).min(1074) as i32;
                self.step1_lr * 2f64.powi(-halvings)
            }
            Phase::Two => self.step2_lr,
        }
    }
}

/// First-phase rate under the default schedule.
pub fn lr_schedule(iteration: u64) -> f64 {
    TrainSchedule::default().lr(Phase::One, iteration)
}
