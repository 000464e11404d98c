/// Compares `analytic` against central differences of `loss` around `params`.
///
/// The step for coordinate `i` is `h * max(1, |params[i]|)`. Returns the worst
/// relative error, using `max(|analytic|, |numeric|, 1e-12)` as denominator.
pub fn finite_difference_check<F>(params: &[f64], analytic: &[f64], h: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let step = h * params[i].abs().max(1.0);
        theta[i] = params[i] + step;
        let up = loss(&theta);
        theta[i] = params[i] - step;
        let down = loss(&theta);
        theta[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
