//! Numerically stable reductions over small dense vectors.
//!
//! Everything here works in log space where it matters. Probabilities are
//! clamped to [`PROB_FLOOR`] before any logarithm, and entropy/KL sums use the
//! `0 * log 0 = 0` convention so sparse distributions are valid inputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Smallest probability admitted before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance used when validating that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// `ln(max(p, PROB_FLOOR))`.
#[inline]
pub fn safe_ln(p: f64) -> f64 {
    ln(p.max(PROB_FLOOR))
}

/// `log Σ exp(v)` with the max-shift trick.
///
/// Entries may be `-inf`; an all `-inf` input reduces to `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite(format!("log_sum_exp input {v}")));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| exp(v - max)).sum();
    Ok(max + ln(sum))
}

/// Softmax of `logits`; the caller guarantees a nonempty, finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| exp(v - max)).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Log-softmax of `logits`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + ln(logits.iter().map(|&v| exp(v - max)).sum::<f64>());
    logits.iter().map(|&v| v - lse).collect()
}

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log sigmoid(x)` without cancellation.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -ln_1p(exp(-x))
    } else {
        x - ln_1p(exp(x))
    }
}

/// `p * ln(p / q)` with `0 ln 0 = 0`; `+inf` when `p > 0 = q`.
#[inline]
pub fn rel_entr(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        p * (ln(p) - ln(q))
    }
}

/// `KL(p || q)`; `+inf` if `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| rel_entr(a, b)).sum()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * ln(v))
        .sum::<f64>()
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Normalize a nonnegative vector; errors if it has no mass.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Exponentiate and normalize a vector of log-weights.
pub fn normalize_log(log_weights: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_weights)?;
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior);
    }
    Ok(log_weights.iter().map(|&v| exp(v - lse)).collect())
}

/// Checks nonnegativity and unit sum within `tol`.
pub fn check_simplex(values: &[f64], tol: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::NotASimplex("empty vector".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::NotASimplex(format!("entry {v}")));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::NotASimplex(format!("sum {total}")));
    }
    Ok(())
}

/// Index of the largest entry (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
