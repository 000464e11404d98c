//! Field-level evaluation: reconstruction quality (PSNR), variance-error
//! agreement (Pearson correlation, JI-ST) and Gaussian NLL.

use std::cmp::Ordering;

use crate::grid::{linear_index, unravel};
use crate::models::gaussian_nll_point;
use crate::{Error, Result};

/// Variance floor used by [`gaussian_nll`] on normalized data.
pub const NLL_VARIANCE_FLOOR: f64 = 1e-6;

/// Default JI-ST fractions (top 1% and top 5%).
pub const DEFAULT_JIST_FRACTIONS: [f64; 2] = [0.01, 0.05];

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "fields have {} and {} voxels",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("metrics need non-empty fields".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_same_len(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / gt.len() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `f64::INFINITY` when the fields match exactly.
pub fn psnr(pred: &[f64], gt: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParam(format!("PSNR peak {peak} must be positive")));
    }
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Sample Pearson correlation of two flattened fields.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Number of voxels in a top-`p` set of `n`: `ceil(p n)`, at least one.
pub fn top_count(n: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParam(format!("top fraction {p} outside (0, 1]")));
    }
    // The small offset keeps products like 0.05 * 100 from rounding up to 6.
    Ok(((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n))
}

/// Indices of the `k` largest values, ordered by value descending and then
/// by index ascending.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        values[b].total_cmp(&values[a]).then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    idx
}

/// Membership mask of the top-`p` voxels of `values`.
pub fn top_mask(values: &[f64], p: f64) -> Result<Vec<bool>> {
    let k = top_count(values.len(), p)?;
    let mut mask = vec![false; values.len()];
    for i in top_indices(values, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Grows a voxel mask by a Chebyshev `radius` (26-connected for radius 1).
pub fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; mask.len()];
    let r = radius as isize;
    let span = |c: usize, n: usize| {
        let lo = (c as isize - r).max(0) as usize;
        let hi = ((c as isize + r) as usize).min(n - 1);
        lo..=hi
    };
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let [x, y, z] = unravel(dims, i);
        for zz in span(z, dims[2]) {
            for yy in span(y, dims[1]) {
                for xx in span(x, dims[0]) {
                    out[linear_index(dims, xx, yy, zz)] = true;
                }
            }
        }
    }
    out
}

/// Jaccard index with spatial tolerance between the top-`p` variance set `A`
/// and top-`p` error set `B`: `|A ∩ dilate(B, radius)| / |A ∪ B|`.
pub fn jaccard_spatial_tolerance(
    variance: &[f64],
    error: &[f64],
    dims: [usize; 3],
    p: f64,
    radius: usize,
) -> Result<f64> {
    check_same_len(variance, error)?;
    let n = dims[0] * dims[1] * dims[2];
    if n != variance.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not match {} voxels",
            variance.len()
        )));
    }
    let a = top_mask(variance, p)?;
    let b = top_mask(error, p)?;
    let grown = dilate(&b, dims, radius);
    let inter = a.iter().zip(&grown).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(inter as f64 / union as f64)
}

/// Mean Gaussian NLL of `gt` under `N(mean, max(var, floor))`.
pub fn gaussian_nll(mean: &[f64], variance: &[f64], gt: &[f64], floor: f64) -> Result<f64> {
    check_same_len(mean, variance)?;
    check_same_len(mean, gt)?;
    let total: f64 = mean
        .iter()
        .zip(variance)
        .zip(gt)
        .map(|((&mu, &var), &y)| gaussian_nll_point(mu, var.max(floor), y))
        .sum();
    Ok(total / gt.len() as f64)
}

/// Squared error of a reconstruction against ground truth, per voxel.
pub fn squared_error(mean: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_same_len(mean, gt)?;
    Ok(mean.iter().zip(gt).map(|(m, y)| (m - y) * (m - y)).collect())
}

/// One evaluation result. `corr` is NaN when either field is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub psnr_db: f64,
    pub corr: f64,
    /// `(p, JI-ST at p)` pairs.
    pub jist: Vec<(f64, f64)>,
    pub nll: f64,
}

fn percent_label(p: f64) -> String {
    let pct = p * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}").replace('.', "_")
    }
}

impl MetricRow {
    /// `model,psnr_db,corr,jist_1pct,jist_5pct,nll` for the default fractions.
    pub fn csv_header(fractions: &[f64]) -> String {
        let mut cols = vec!["model".to_string(), "psnr_db".into(), "corr".into()];
        cols.extend(fractions.iter().map(|&p| format!("jist_{}pct", percent_label(p))));
        cols.push("nll".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.model.clone(), self.psnr_db.to_string(), self.corr.to_string()];
        cols.extend(self.jist.iter().map(|(_, j)| j.to_string()));
        cols.push(self.nll.to_string());
        cols.join(",")
    }
}

/// All metrics for a reconstructed mean/variance pair. The error field is
/// `(mean - gt)^2`; PSNR uses peak 1 (normalized data); JI-ST uses radius 1.
pub fn evaluate_fields(
    model: &str,
    dims: [usize; 3],
    gt: &[f64],
    mean: &[f64],
    variance: &[f64],
    fractions: &[f64],
) -> Result<MetricRow> {
    let error = squared_error(mean, gt)?;
    let corr = match pearson_correlation(variance, &error) {
        Ok(c) => c,
        Err(Error::UndefinedCorrelation) => f64::NAN,
        Err(e) => return Err(e),
    };
    let jist = fractions
        .iter()
        .map(|&p| Ok((p, jaccard_spatial_tolerance(variance, &error, dims, p, 1)?)))
        .collect::<Result<_>>()?;
    Ok(MetricRow {
        model: model.to_string(),
        psnr_db: psnr(mean, gt, 1.0)?,
        corr,
        jist,
        nll: gaussian_nll(mean, variance, gt, NLL_VARIANCE_FLOOR)?,
    })
}
