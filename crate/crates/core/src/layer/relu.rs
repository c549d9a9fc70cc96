use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{check_dim, Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `Φ(z) = ½·erfc(−z/√2)`; accurate in both tails.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// `E[max(0, X)]` for `X ~ N(m, s²)`: `m·Φ(m/s) + s·φ(m/s)`, and `max(m, 0)` when `s = 0`.
#[inline]
pub fn rectified_gaussian_mean(m: f64, s: f64) -> f64 {
    if s == 0.0 {
        return m.max(0.0);
    }
    let z = m / s;
    m * std_normal_cdf(z) + s * std_normal_pdf(z)
}

/// Expected ReLU of the 1-D mixture `Σ_i p_i N(m_i, σ_i²)`.
pub fn expected_relu_scalar(weights: &[f64], means: &[f64], stds: &[f64]) -> Result<f64> {
    expected_relu_with(RectifiedMean::Exact, weights, means, stds)
}

/// Which closed form to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifiedMean {
    /// `m·Φ(m/σ) + σ·φ(m/σ)`.
    Exact,
    /// `½(m + σ/(2√(2π))·exp(−m²/2σ²) + m·erf(m/(σ√2)))`, i.e. a σ-coefficient of
    /// `1/(4√(2π))` instead of `1/√(2π)`.
    QuarterSigma,
}

impl RectifiedMean {
    #[inline]
    pub fn eval(self, m: f64, s: f64) -> f64 {
        match self {
            RectifiedMean::Exact => rectified_gaussian_mean(m, s),
            RectifiedMean::QuarterSigma => {
                if s == 0.0 {
                    return m.max(0.0);
                }
                let z = m / s;
                0.5 * (m
                    + s / (2.0 * (2.0 * PI).sqrt()) * (-0.5 * z * z).exp()
                    + m * libm::erf(z * FRAC_1_SQRT_2))
            }
        }
    }
}

pub fn expected_relu_with(
    form: RectifiedMean,
    weights: &[f64],
    means: &[f64],
    stds: &[f64],
) -> Result<f64> {
    check_dim("number of means", weights.len(), means.len())?;
    check_dim("number of stds", weights.len(), stds.len())?;
    if let Some(s) = stds.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "standard deviation must be >= 0, got {s}"
        )));
    }
    Ok(weights
        .iter()
        .zip(means)
        .zip(stds)
        .map(|((&p, &m), &s)| p * form.eval(m, s))
        .sum())
}
