//! Training objectives and their gradients with respect to decoder outputs.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use super::stats::mean_and_variance;
use crate::{Error, Result};

/// Floor applied to batch densities so their logarithms stay finite.
pub const DENSITY_EPS: f64 = 1e-12;

fn check_targets(preds: &ArrayView2<f64>, targets: &[f64]) -> Result<()> {
    if preds.ncols() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction columns for {} targets",
            preds.ncols(),
            targets.len()
        )));
    }
    Ok(())
}

/// `(1/B) * sum_i sum_b (f_i(x_b) - y_b)^2` over an `M x B` prediction array.
pub fn member_loss(preds: ArrayView2<f64>, targets: &[f64]) -> Result<f64> {
    check_targets(&preds, targets)?;
    let b = targets.len() as f64;
    // Per-member partial sums keep duplicated members exactly additive.
    let sum: f64 = preds
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(targets).map(|(f, y)| (f - y) * (f - y)).sum::<f64>())
        .sum();
    Ok(sum / b)
}

/// [`member_loss`] and its gradient with respect to every prediction.
pub fn member_loss_grad(preds: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Array2<f64>)> {
    let loss = member_loss(preds, targets)?;
    let scale = 2.0 / targets.len() as f64;
    let mut grad = preds.to_owned();
    for mut row in grad.rows_mut() {
        for (g, y) in row.iter_mut().zip(targets) {
            *g = scale * (*g - y);
        }
    }
    Ok((loss, grad))
}

struct Normalized {
    density: Vec<f64>,
    raw_sum: f64,
    unfloored: Vec<f64>,
    floored_sum: f64,
}

fn normalize(values: &[f64]) -> Normalized {
    let raw_sum = values.iter().sum::<f64>() + DENSITY_EPS;
    let unfloored: Vec<f64> = values.iter().map(|v| v / raw_sum).collect();
    let floored: Vec<f64> = unfloored.iter().map(|u| u.max(DENSITY_EPS)).collect();
    let floored_sum: f64 = floored.iter().sum();
    Normalized {
        density: floored.iter().map(|w| w / floored_sum).collect(),
        raw_sum,
        unfloored,
        floored_sum,
    }
}

/// Turns non-negative batch values into a discrete density: divide by
/// `sum + 1e-12`, floor at `1e-12`, renormalize. All-zero input yields `1/B`.
pub fn density_normalize(values: &[f64]) -> Vec<f64> {
    normalize(values).density
}

/// Pulls `dL/d(density)` back to `dL/d(values)` through [`density_normalize`].
fn density_normalize_vjp(values: &[f64], n: &Normalized, upstream: &[f64]) -> Vec<f64> {
    let floored_dot: f64 = upstream
        .iter()
        .zip(&n.unfloored)
        .map(|(g, u)| g * u.max(DENSITY_EPS))
        .sum();
    let w2 = n.floored_sum * n.floored_sum;
    let d_unfloored: Vec<f64> = upstream
        .iter()
        .zip(&n.unfloored)
        .map(|(g, &u)| {
            if u >= DENSITY_EPS {
                g / n.floored_sum - floored_dot / w2
            } else {
                0.0
            }
        })
        .collect();
    let raw_dot: f64 = d_unfloored.iter().zip(values).map(|(g, v)| g * v).sum();
    let s2 = n.raw_sum * n.raw_sum;
    d_unfloored
        .iter()
        .map(|g| g / n.raw_sum - raw_dot / s2)
        .collect()
}

fn kl_term(err_density: &[f64], var_density: &[f64]) -> f64 {
    let b = err_density.len() as f64;
    err_density
        .iter()
        .zip(var_density)
        .map(|(q, p)| q * (q / p).ln())
        .sum::<f64>()
        / b
}

/// `(1/B) * sum_b f_err(x_b) * ln(f_err(x_b) / f_var(x_b))` with both densities
/// from [`density_normalize`].
pub fn variance_regularization_loss(variances: &[f64], sq_errors: &[f64]) -> Result<f64> {
    if variances.len() != sq_errors.len() || variances.is_empty() {
        return Err(Error::Shape(format!(
            "{} variances for {} errors",
            variances.len(),
            sq_errors.len()
        )));
    }
    Ok(kl_term(
        &density_normalize(sq_errors),
        &density_normalize(variances),
    ))
}

/// [`variance_regularization_loss`] and its gradient with respect to the
/// variances. The error density is a constant: no gradient reaches the errors.
pub fn variance_regularization_grad(variances: &[f64], sq_errors: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = variance_regularization_loss(variances, sq_errors)?;
    let q = density_normalize(sq_errors);
    let n = normalize(variances);
    let b = variances.len() as f64;
    let d_density: Vec<f64> = q
        .iter()
        .zip(&n.density)
        .map(|(q, p)| -q / (b * p))
        .collect();
    Ok((loss, density_normalize_vjp(variances, &n, &d_density)))
}

/// Loss parts and output gradient of one ensemble training step.
#[derive(Debug, Clone)]
pub struct EnsembleLoss {
    pub member: f64,
    pub var: f64,
    pub total: f64,
    /// `dL/d f_i(x_b)`, `M x B`.
    pub grad: Array2<f64>,
}

/// `L_member + lambda * L_var` over `M x B` member predictions. The squared
/// error uses the ensemble mean. With one member, or `lambda == 0`, only the
/// member loss contributes gradient.
pub fn ensemble_objective(preds: ArrayView2<f64>, targets: &[f64], lambda: f64) -> Result<EnsembleLoss> {
    let (member, mut grad) = member_loss_grad(preds, targets)?;
    let m = preds.nrows();
    if m < 2 {
        return Ok(EnsembleLoss {
            member,
            var: 0.0,
            total: member,
            grad,
        });
    }
    let (mean, variance) = mean_and_variance(preds)?;
    let sq_errors: Vec<f64> = mean.iter().zip(targets).map(|(mu, y)| (mu - y) * (mu - y)).collect();
    if lambda == 0.0 {
        let var = variance_regularization_loss(&variance, &sq_errors)?;
        return Ok(EnsembleLoss {
            member,
            var,
            total: member,
            grad,
        });
    }
    let (var, d_variance) = variance_regularization_grad(&variance, &sq_errors)?;
    let scale = 2.0 / (m - 1) as f64;
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        for (b, g) in row.iter_mut().enumerate() {
            *g += lambda * d_variance[b] * scale * (preds[[i, b]] - mean[b]);
        }
    }
    Ok(EnsembleLoss {
        member,
        var,
        total: member + lambda * var,
        grad,
    })
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gaussian negative log-likelihood of one point.
#[inline]
pub fn gaussian_nll_point(mean: f64, variance: f64, target: f64) -> f64 {
    let d = target - mean;
    0.5 * (2.0 * PI * variance).ln() + d * d / (2.0 * variance)
}

/// Output of the variance-head objective.
#[derive(Debug, Clone)]
pub struct NllLoss {
    pub loss: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `dL/d(mu_raw, s)`, `B x 2`.
    pub grad: Array2<f64>,
}

/// Maps a `(mu, s)` head output to `(mean, softplus(s) + floor)`.
pub fn pv_head(outputs: ArrayView2<f64>, floor: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if outputs.ncols() != 2 {
        return Err(Error::Shape(format!(
            "variance head needs 2 outputs, got {}",
            outputs.ncols()
        )));
    }
    let mean = outputs.column(0).to_vec();
    let variance = outputs.column(1).iter().map(|&s| softplus(s) + floor).collect();
    Ok((mean, variance))
}

/// Mean Gaussian NLL of a `(mu, s)` head and its gradient.
pub fn pv_forward_and_loss(outputs: ArrayView2<f64>, targets: &[f64], floor: f64) -> Result<NllLoss> {
    let (mean, variance) = pv_head(outputs, floor)?;
    if targets.len() != mean.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} targets",
            mean.len(),
            targets.len()
        )));
    }
    let b = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((targets.len(), 2));
    for (i, &y) in targets.iter().enumerate() {
        let (mu, var) = (mean[i], variance[i]);
        loss += gaussian_nll_point(mu, var, y);
        let d = y - mu;
        grad[[i, 0]] = -d / var / b;
        let d_var = 0.5 / var - d * d / (2.0 * var * var);
        grad[[i, 1]] = d_var * sigmoid(outputs[[i, 1]]) / b;
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            lambda: 0.0,
            member: loss,
            var: 0.0,
        });
    }
    Ok(NllLoss {
        loss,
        mean,
        variance,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_check;
    use ndarray::array;

    #[test]
    fn member_loss_cases() {
        assert_eq!(member_loss(array![[0.5, 0.2]].view(), &[0.5, 0.2]).unwrap(), 0.0);
        let single = member_loss(array![[1.3]].view(), &[1.0]).unwrap();
        assert!((single - 0.09).abs() < 1e-12);
        let e: f64 = 0.25;
        let three = member_loss(array![[e], [e], [e]].view(), &[0.0]).unwrap();
        assert!((three - 3.0 * e * e).abs() < 1e-15);
        assert_eq!(member_loss(array![[1.0, 3.0]].view(), &[0.0, 0.0]).unwrap(), 5.0);
        assert!(member_loss(array![[1.0]].view(), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn densities() {
        let d = density_normalize(&[1.0, 1.0, 2.0]);
        for (a, b) in d.iter().zip([0.25, 0.25, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(density_normalize(&[0.0, 0.0]), vec![0.5, 0.5]);
        let d = density_normalize(&[0.0, 3.0, 1e-30, 7.0]);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn kl_hand_value() {
        // error densities {0.8, 0.2}, variance densities {0.5, 0.5}
        let l = variance_regularization_loss(&[1.0, 1.0], &[0.8, 0.2]).unwrap();
        let expect = (0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-10);
        assert!((l - 0.0964).abs() < 1e-4);
        let same = variance_regularization_loss(&[0.3, 0.1, 0.6], &[3.0, 1.0, 6.0]).unwrap();
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let var = [0.02, 0.5, 0.13, 0.9, 1e-3];
        let err = [0.1, 0.05, 0.4, 0.2, 0.3];
        let (_, g) = variance_regularization_grad(&var, &err).unwrap();
        let e = finite_difference_check(&var, &g, 1e-6, |v| {
            variance_regularization_loss(v, &err).unwrap()
        });
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn ensemble_gradient_matches_differences_with_frozen_errors() {
        let preds = array![[0.1, 0.4, 0.9, 0.3], [0.2, 0.35, 0.7, 0.31], [0.05, 0.5, 0.8, 0.2]];
        let targets = [0.12, 0.45, 0.6, 0.3];
        let lambda = 2.5;
        let out = ensemble_objective(preds.view(), &targets, lambda).unwrap();
        let (mean, _) = mean_and_variance(preds.view()).unwrap();
        let frozen: Vec<f64> = mean.iter().zip(&targets).map(|(m, y)| (m - y) * (m - y)).collect();
        let flat: Vec<f64> = preds.iter().copied().collect();
        let err = finite_difference_check(&flat, out.grad.as_slice().unwrap(), 1e-6, |t| {
            let p = Array2::from_shape_vec((3, 4), t.to_vec()).unwrap();
            let (_, v) = mean_and_variance(p.view()).unwrap();
            member_loss(p.view(), &targets).unwrap()
                + lambda * variance_regularization_loss(&v, &frozen).unwrap()
        });
        assert!(err < 1e-5, "{err}");
        assert!((out.total - (out.member + lambda * out.var)).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_is_pure_member_loss() {
        let preds = array![[0.1, 0.4], [0.3, 0.2]];
        let targets = [0.0, 0.5];
        let a = ensemble_objective(preds.view(), &targets, 0.0).unwrap();
        let (_, g) = member_loss_grad(preds.view(), &targets).unwrap();
        assert_eq!(a.grad, g);
        assert_eq!(a.total, a.member);
    }

    #[test]
    fn pv_reference_values() {
        // s with softplus(s) + 1e-6 = 1
        let s = (1.0f64 - 1e-6).exp_m1().ln();
        let out = pv_forward_and_loss(array![[0.3, s]].view(), &[0.3], 1e-6).unwrap();
        assert!((out.variance[0] - 1.0).abs() < 1e-12);
        assert!((out.loss - 0.5 * (2.0 * PI).ln()).abs() < 1e-9);
        let near = pv_forward_and_loss(array![[0.3, s]].view(), &[0.4], 1e-6).unwrap();
        let far = pv_forward_and_loss(array![[0.3, s]].view(), &[0.9], 1e-6).unwrap();
        assert!(far.loss > near.loss && near.loss > out.loss);
        let floor = pv_forward_and_loss(array![[0.0, -800.0]].view(), &[0.0], 1e-6).unwrap();
        assert!(floor.variance[0] >= 1e-6);
    }

    #[test]
    fn pv_gradient_matches_differences() {
        let outs = array![[0.1, -0.3], [0.5, 1.2], [0.9, 0.0]];
        let targets = [0.2, 0.4, 0.1];
        let g = pv_forward_and_loss(outs.view(), &targets, 1e-6).unwrap().grad;
        let flat: Vec<f64> = outs.iter().copied().collect();
        let err = finite_difference_check(&flat, g.as_slice().unwrap(), 1e-6, |t| {
            let o = Array2::from_shape_vec((3, 2), t.to_vec()).unwrap();
            pv_forward_and_loss(o.view(), &targets, 1e-6).unwrap().loss
        });
        assert!(err < 1e-6, "{err}");
    }
}
