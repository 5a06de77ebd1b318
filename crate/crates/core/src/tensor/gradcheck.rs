//! Central finite-difference checks against the tape.

use super::value::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Largest `|analytic - fd| / max(1, |fd|)` over the entries of `x`.
///
/// `f` evaluates the scalar function at a point; `grad` returns its
/// autodiff gradient there.
pub fn grad_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    grad: impl FnOnce(&Tensor) -> Result<Vec<f64>>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let analytic = grad(x)?;
    if analytic.len() != x.len() {
        return Err(Error::Dimension(
            "gradient length differs from input".into(),
        ));
    }
    let fd = central_differences(&mut f, x, eps)?;
    Ok(max_relative_error(&analytic, &fd))
}

pub fn central_differences(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation near entry {i}"
            )));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
