//! Calibrating the unquantified constants of an inequality `measured ≤ C · rhs`
//! and estimating convergence slopes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest factor stable constants may differ by between sample sets.
pub const STABILITY_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantFit {
    /// Smallest `C` covering the calibration set.
    pub calibration: f64,
    /// Smallest `C` covering the validation set.
    pub validation: f64,
    /// `max(a/b, b/a)` of the two.
    pub spread: f64,
    pub stable: bool,
}

/// Smallest `C` with `measured ≤ C · rhs` on every sample.
pub fn tightest_constant(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("no samples to fit".into()));
    }
    let mut c: f64 = 0.0;
    for &(measured, rhs) in samples {
        if !(rhs > 0.0) || !measured.is_finite() {
            return Err(Error::Parameter(format!("bound must be positive and measurement finite, got {measured} <= C {rhs}")));
        }
        c = c.max(measured / rhs);
    }
    Ok(c)
}

/// Fits on `calibration` and refits on `validation`.
pub fn fit_constant(calibration: &[(f64, f64)], validation: &[(f64, f64)]) -> Result<ConstantFit> {
    let a = tightest_constant(calibration)?;
    let b = tightest_constant(validation)?;
    let spread = if a > 0.0 && b > 0.0 {
        (a / b).max(b / a)
    } else if a == b {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(ConstantFit { calibration: a, validation: b, spread, stable: spread <= STABILITY_FACTOR })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Parameter("need at least two matched points for a slope".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Parameter("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("abscissae coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}
