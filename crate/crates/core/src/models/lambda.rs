use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Exponential ramp of the variance-regularization weight:
/// `lambda(t) = min + (max - min) * (r^((t-1)/(t_max-1)) - 1) / (r - 1)` for `t` in `1..=t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub growth_rate: f64,
    pub t_max: usize,
}

impl LambdaSchedule {
    pub fn new(lambda_min: f64, lambda_max: f64, growth_rate: f64, t_max: usize) -> Result<Self> {
        if !(lambda_min >= 0.0 && lambda_max >= lambda_min && lambda_max.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "lambda range needs 0 <= min <= max (got {lambda_min}, {lambda_max})"
            )));
        }
        if !(growth_rate > 1.0 && growth_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "growth rate {growth_rate} must be finite and > 1"
            )));
        }
        if t_max < 2 {
            return Err(Error::InvalidParam(format!("t_max {t_max} must be >= 2")));
        }
        Ok(Self {
            lambda_min,
            lambda_max,
            growth_rate,
            t_max,
        })
    }

    pub fn lambda_at(&self, t: usize) -> Result<f64> {
        if !(1..=self.t_max).contains(&t) {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 1,
                hi: self.t_max,
            });
        }
        let r = self.growth_rate;
        let exponent = (t - 1) as f64 / (self.t_max - 1) as f64;
        let ramp = (r.powf(exponent) - 1.0) / (r - 1.0);
        Ok(self.lambda_min + (self.lambda_max - self.lambda_min) * ramp)
    }
}
