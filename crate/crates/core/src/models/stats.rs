use ndarray::{Array2, ArrayView2};

use crate::{Error, Result};

/// Per-coordinate ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Raw member predictions, `M x B`. Empty (zero rows) for models that
    /// predict a variance directly.
    pub members: Array2<f64>,
}

impl PredictionStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Mean and unbiased (`M - 1`) variance over the rows of an `M x B` array.
pub fn ensemble_stats(preds: ArrayView2<f64>) -> Result<PredictionStats> {
    let (mean, variance) = mean_and_variance(preds)?;
    Ok(PredictionStats {
        mean,
        variance,
        members: preds.to_owned(),
    })
}

pub(crate) fn mean_and_variance(preds: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = preds.nrows();
    if m < 2 {
        return Err(Error::InvalidParam(format!(
            "ensemble statistics need at least 2 members, got {m}"
        )));
    }
    // Shifted by the first member, so identical members give exactly zero.
    let b = preds.ncols();
    let base = preds.row(0);
    let mut shift = vec![0.0; b];
    for row in preds.rows() {
        for ((acc, v), f0) in shift.iter_mut().zip(row).zip(base) {
            *acc += v - f0;
        }
    }
    shift.iter_mut().for_each(|v| *v /= m as f64);
    let mut variance = vec![0.0; b];
    for row in preds.rows() {
        for (((acc, v), f0), d) in variance.iter_mut().zip(row).zip(base).zip(&shift) {
            let r = (v - f0) - d;
            *acc += r * r;
        }
    }
    variance.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    let mean = base.iter().zip(&shift).map(|(f0, d)| f0 + d).collect();
    Ok((mean, variance))
}
