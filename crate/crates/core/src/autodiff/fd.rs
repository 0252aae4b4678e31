use super::tensor::Tensor;
use super::AutodiffError;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_oracle(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor, AutodiffError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFiniteEvaluation { coordinate: i });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(|b_i|, floor)` with a small absolute floor so that
/// near-zero reference entries do not dominate.
pub fn max_relative_error(actual: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    actual
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / r.abs().max(scale * 1e-3).max(floor))
        .fold(0.0, f64::max)
}
