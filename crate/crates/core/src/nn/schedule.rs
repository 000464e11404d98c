use std::f64::consts::PI;

use crate::{Error, Result};

/// Cosine annealing from `initial` down to `floor` over `t_max` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub floor: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, floor: f64, t_max: usize) -> Result<Self> {
        if !(initial > floor && floor >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "learning rates need initial > floor >= 0 (got {initial}, {floor})"
            )));
        }
        if t_max == 0 {
            return Err(Error::InvalidParam("t_max must be >= 1".into()));
        }
        Ok(Self {
            initial,
            floor,
            t_max,
        })
    }

    /// Learning rate at step `t` in `0..=t_max`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 0,
                hi: self.t_max,
            });
        }
        let phase = PI * t as f64 / self.t_max as f64;
        Ok(self.floor + 0.5 * (self.initial - self.floor) * (1.0 + phase.cos()))
    }
}
