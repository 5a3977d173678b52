//! Vector primitives shared by every scoring path.

use crate::error::{Error, Result};

/// Norms below this are rejected rather than normalized.
pub const MIN_NORM: f64 = 1e-12;

pub fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean length.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("vector"));
    }
    check_finite(v)?;
    let n = norm(v);
    if n < MIN_NORM {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Inner product of two unit vectors. The clamp only absorbs rounding overshoot.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}
