use super::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|fd − analytic| / max(1, |fd|, |analytic|)` between
/// the central-difference gradient of `f` at `x` and `analytic`.
pub fn finite_diff_check(
    f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> f64 {
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let fd = numeric_grad(f, x, h);
    fd.data()
        .iter()
        .zip(analytic.data())
        .map(|(&a, &b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}
