//! Small dense-vector helpers shared by the numerical modules.

use crate::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`. Fails on a zero or non-finite norm.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(a);
    if !norm.is_finite() {
        return Err(Error::NonFinite("normalize"));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm("normalize"));
    }
    Ok(a.iter().map(|x| x / norm).collect())
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(context: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
