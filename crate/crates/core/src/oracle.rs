//! Independent oracles for the closed-form layer.
//!
//! [`mc_expected_forward`] samples the mixture, runs every sample through the plain
//! convolution and compares the empirical mean activation with the analytic one.
//! [`quadrature_expected_relu`] integrates the rectified mixture density numerically.
//! Neither uses the closed-form rectified-Gaussian expression.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::layer::{misconv_forward, Activation, ConvPlan, FeatureMap, InputShape, KernelStack};
use crate::mfa::MfaModel;
use crate::rng::{derive_seed, seeded_rng};

/// Per-coordinate failure threshold on the z-score.
pub const Z_FAIL: f64 = 4.0;
/// Fraction of coordinates allowed above [`Z_FAIL`].
pub const MAX_FRACTION_ABOVE: f64 = 0.01;
/// Smallest sample count accepted by the Monte-Carlo oracle.
pub const MIN_SAMPLES: usize = 1000;

/// Relative resolution of a chunked sample mean.
pub const ROUNDING_FLOOR: f64 = 1e-11;

const CHUNK: usize = 2048;

/// Comparison of analytic values against Monte-Carlo estimates, one entry per output coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub analytic: Vec<f64>,
    pub empirical: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub n_samples: usize,
    pub max_z: f64,
    pub mean_z: f64,
    pub frac_above: f64,
}

impl OracleReport {
    /// Builds a report from analytic values and sample moments.
    ///
    /// The standard error is floored at `pre_std / N`, the shift one extra sample crossing the
    /// ReLU threshold would cause, so coordinates where no sample left the flat part of the
    /// activation are not judged against a zero error bar. It is also floored at
    /// [`ROUNDING_FLOOR`]`·(1 + |analytic|)` so summation round-off on point-mass coordinates does
    /// not count as sampling error. Coordinates whose samples are all identical get `z = 0` when
    /// the analytic value matches to 1e-9 relative.
    pub fn new(analytic: Vec<f64>, moments: &McMoments) -> Result<Self> {
        check_dim("analytic length", moments.mean.len(), analytic.len())?;
        let n = moments.n_samples as f64;
        let mut se = Vec::with_capacity(analytic.len());
        let mut z = Vec::with_capacity(analytic.len());
        for (j, &a) in analytic.iter().enumerate() {
            let diff = (a - moments.mean[j]).abs();
            let scale = 1.0 + a.abs();
            let s = if moments.se[j] > 0.0 {
                moments.se[j]
                    .max(moments.pre_std[j] / n)
                    .max(ROUNDING_FLOOR * scale)
            } else {
                moments.pre_std[j] / n
            };
            let zj = if s > 0.0 {
                diff / s
            } else if diff <= 1e-9 * scale {
                0.0
            } else {
                diff / (f64::EPSILON * scale)
            };
            se.push(s);
            z.push(zj);
        }
        let max_z = z.iter().copied().fold(0.0, f64::max);
        let mean_z = z.iter().sum::<f64>() / z.len().max(1) as f64;
        let frac_above = z.iter().filter(|&&v| v > Z_FAIL).count() as f64 / z.len().max(1) as f64;
        Ok(Self {
            analytic,
            empirical: moments.mean.clone(),
            se,
            z,
            n_samples: moments.n_samples,
            max_z,
            mean_z,
            frac_above,
        })
    }

    /// At most [`MAX_FRACTION_ABOVE`] of the coordinates exceed [`Z_FAIL`].
    pub fn passes(&self) -> bool {
        self.frac_above <= MAX_FRACTION_ABOVE
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coord,analytic,empirical,se,z\n");
        for j in 0..self.z.len() {
            let _ = writeln!(
                out,
                "{j},{:e},{:e},{:e},{:e}",
                self.analytic[j], self.empirical[j], self.se[j], self.z[j]
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "{} coords={} samples={} max_z={:.3} mean_z={:.3} frac_z>{}={:.4}",
            if self.passes() { "PASS" } else { "FAIL" },
            self.z.len(),
            self.n_samples,
            self.max_z,
            self.mean_z,
            Z_FAIL,
            self.frac_above
        )
    }
}

/// Empirical moments of the activated convolution output under the model.
#[derive(Debug, Clone, PartialEq)]
pub struct McMoments {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    /// Standard error of `mean`.
    pub se: Vec<f64>,
    /// Sample standard deviation of the pre-activation output.
    pub pre_std: Vec<f64>,
}

#[derive(Clone)]
struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn from_values(len: usize, count: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut mean = vec![0.0; len];
        let mut m2 = vec![0.0; len];
        let mut first = vec![0.0; len];
        let mut constant = vec![true; len];
        for s in 0..count {
            for (j, m) in mean.iter_mut().enumerate() {
                let v = value(s, j);
                if s == 0 {
                    first[j] = v;
                } else if v != first[j] {
                    constant[j] = false;
                }
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for s in 0..count {
            for (j, acc) in m2.iter_mut().enumerate() {
                let d = value(s, j) - mean[j];
                *acc += d * d;
            }
        }
        // Averaging identical values is not exact in floating point.
        for j in (0..len).filter(|&j| constant[j] && count > 0) {
            mean[j] = first[j];
            m2[j] = 0.0;
        }
        Self {
            count: count as f64,
            mean,
            m2,
        }
    }

    fn merge(&mut self, other: &Welford) {
        let total = self.count + other.count;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * other.count / total;
            self.m2[j] += other.m2[j] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }

    fn variance(&self, j: usize) -> f64 {
        if self.count > 1.0 {
            self.m2[j] / (self.count - 1.0)
        } else {
            0.0
        }
    }
}

/// Samples the model `n_samples` times and convolves every sample with the plain layer.
///
/// Samples are drawn in fixed-size chunks, each from its own stream derived from `seed` and the
/// chunk index, and merged in chunk order; the result does not depend on the worker count.
pub fn mc_moments(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
    n_samples: usize,
    seed: u64,
) -> Result<McMoments> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "Monte-Carlo oracle needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    check_dim("model dimension", input.len(), model.dim())?;
    let plan = ConvPlan::new(kernels, input)?;
    let weights = kernels.weight_matrix();
    let out_len = plan.output.len();
    let positions = plan.positions();
    let filters = kernels.filters();
    let bias = kernels.bias();
    let chunks = n_samples.div_ceil(CHUNK);

    let stats: Vec<(Welford, Welford)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK.min(n_samples - c * CHUNK);
            let mut rng = seeded_rng(derive_seed(seed, c as u64));
            let samples: Vec<_> = (0..count).map(|_| model.sample_with(&mut rng)).collect();
            let slices: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
            let out = plan.apply(&weights, &slices);
            let raw = out.as_slice();
            // Output coordinate j = f·P + q of sample s lives at column s·P + q, row f.
            let pre = |s: usize, j: usize| {
                let (f, q) = (j / positions, j % positions);
                raw[(s * positions + q) * filters + f] + bias[f]
            };
            let pre_stats = Welford::from_values(out_len, count, pre);
            let post_stats =
                Welford::from_values(out_len, count, |s, j| activation.apply(pre(s, j)));
            (post_stats, pre_stats)
        })
        .collect();

    let mut iter = stats.into_iter();
    let (mut post, mut pre) = iter.next().expect("at least one chunk");
    for (p, q) in iter {
        post.merge(&p);
        pre.merge(&q);
    }
    let n = n_samples as f64;
    Ok(McMoments {
        n_samples,
        se: (0..out_len)
            .map(|j| (post.variance(j) / n).sqrt())
            .collect(),
        pre_std: (0..out_len).map(|j| pre.variance(j).sqrt()).collect(),
        mean: post.mean,
    })
}

/// Monte-Carlo check of [`misconv_forward`] against the plain convolution of model samples.
pub fn mc_expected_forward(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
    n_samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    let analytic = misconv_forward(model, kernels, input, activation)?;
    compare_with_monte_carlo(
        &analytic, model, kernels, input, activation, n_samples, seed,
    )
}

/// Like [`mc_expected_forward`], with the analytic map supplied by the caller.
pub fn compare_with_monte_carlo(
    analytic: &FeatureMap,
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
    n_samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    let moments = mc_moments(model, kernels, input, activation, n_samples, seed)?;
    OracleReport::new(analytic.data.clone(), &moments)
}

/// Monte-Carlo estimate `(mean, standard error)` of `E[ReLU(X)]` for a 1-D Gaussian mixture.
pub fn mc_expected_relu_scalar(
    weights: &[f64],
    means: &[f64],
    stds: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_dim("number of means", weights.len(), means.len())?;
    check_dim("number of stds", weights.len(), stds.len())?;
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    let mut rng = seeded_rng(seed);
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&0.0);
    let values: Vec<f64> = (0..n_samples)
        .map(|_| {
            let u = rand::Rng::random::<f64>(&mut rng) * total;
            let i = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(weights.len() - 1);
            let z: f64 = StandardNormal.sample(&mut rng);
            (means[i] + stds[i] * z).max(0.0)
        })
        .collect();
    let w = Welford::from_values(1, n_samples, |s, _| values[s]);
    Ok((w.mean[0], (w.variance(0) / n_samples as f64).sqrt()))
}

// Gauss-Kronrod 7/15 nodes and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// `(Kronrod estimate, |Kronrod − Gauss|)` on `[a, b]`.
pub(crate) fn gauss_kronrod_15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = half * XGK[i];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive Gauss-Kronrod integration over the given breakpoints.
pub(crate) fn integrate_adaptive(
    f: &impl Fn(f64) -> f64,
    breakpoints: &[f64],
    abs_tol: f64,
    max_intervals: usize,
) -> Result<(f64, f64)> {
    let mut intervals: Vec<(f64, f64, f64, f64)> = breakpoints
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (v, e) = gauss_kronrod_15(f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    loop {
        let total: f64 = intervals.iter().map(|iv| iv.2).sum();
        let error: f64 = intervals.iter().map(|iv| iv.3).sum();
        if error <= abs_tol {
            return Ok((total, error));
        }
        if intervals.len() >= max_intervals {
            return Err(Error::QuadratureNonConvergence {
                estimate: total,
                error,
            });
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .expect("nonempty");
        let (a, b, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (a + b);
        if !(mid > a && mid < b) {
            return Err(Error::QuadratureNonConvergence {
                estimate: total,
                error,
            });
        }
        for (lo, hi) in [(a, mid), (mid, b)] {
            let (v, e) = gauss_kronrod_15(f, lo, hi);
            intervals.push((lo, hi, v, e));
        }
    }
}

/// Standardized lower limit below which the Gaussian mass is zero in double precision.
const Z_FLOOR: f64 = -40.0;

/// `∫₀^∞ x·Σ p_i N(x; m_i, σ_i²) dx` by adaptive quadrature to `abs_tol`.
///
/// Each component is integrated in its standardized variable, `p_i·∫ (m_i + σ_i·z)·φ(z) dz`
/// over `z ≥ −m_i/σ_i`, which is the window `[0, m_i + 12·σ_i]` in the original variable. The
/// window is split at `z ∈ {0, ±1, ±2, ±4, ±8, ±12}` and widened until the Mills-ratio bound on
/// the neglected tail is below the component's share of `abs_tol / 10`. Working in `z` keeps
/// narrow components resolvable. Components with `σ_i = 0` contribute `p_i·max(m_i, 0)`.
pub fn quadrature_expected_relu(
    weights: &[f64],
    means: &[f64],
    stds: &[f64],
    abs_tol: f64,
) -> Result<f64> {
    check_dim("number of means", weights.len(), means.len())?;
    check_dim("number of stds", weights.len(), stds.len())?;
    if !(abs_tol > 0.0) {
        return Err(Error::InvalidParameter("abs_tol must be > 0".into()));
    }
    if stds.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidParameter(
            "standard deviations must be >= 0".into(),
        ));
    }
    let share = abs_tol / weights.len().max(1) as f64;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let phi = |z: f64| (-0.5 * z * z).exp() * inv_sqrt_2pi;
    let mut total = 0.0;
    for ((&p, &m), &s) in weights.iter().zip(means).zip(stds) {
        if p == 0.0 {
            continue;
        }
        if s == 0.0 {
            total += p * m.max(0.0);
            continue;
        }
        let lower = (-m / s).max(Z_FLOOR);
        let tail = |u: f64| p * (m.abs() / u + s) * phi(u);
        let mut upper = lower.max(0.0) + 12.0;
        let mut widen = 0;
        while tail(upper) > share / 10.0 {
            upper += 4.0;
            widen += 1;
            if widen > 100 {
                return Err(Error::QuadratureNonConvergence {
                    estimate: f64::NAN,
                    error: tail(upper),
                });
            }
        }
        let mut breaks = vec![lower, upper];
        for c in [-12.0, -8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0, 12.0] {
            if c > lower && c < upper {
                breaks.push(c);
            }
        }
        breaks.sort_by(f64::total_cmp);
        let integrand = |z: f64| p * (m + s * z) * phi(z);
        let (value, _) = integrate_adaptive(&integrand, &breaks, share * 0.9, 20_000)?;
        total += value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_rule_is_exact_on_polynomials() {
        // Exact up to degree 22 on a single interval.
        for deg in 0..=20 {
            let (v, _) = gauss_kronrod_15(&|x: f64| x.powi(deg), -1.0, 1.0);
            let exact = if deg % 2 == 0 {
                2.0 / (deg as f64 + 1.0)
            } else {
                0.0
            };
            assert!((v - exact).abs() < 1e-14, "degree {deg}: {v} vs {exact}");
        }
        let (v, _) = gauss_kronrod_15(&|x: f64| x.powi(12), 0.0, 2.0);
        assert!((v - 2f64.powi(13) / 13.0).abs() < 1e-10);
    }

    #[test]
    fn adaptive_integration_of_smooth_functions() {
        let (v, e) =
            integrate_adaptive(&|x: f64| x.sin(), &[0.0, std::f64::consts::PI], 1e-12, 1000)
                .unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v} ± {e}");
        let (v, _) = integrate_adaptive(&|x: f64| (-x).exp(), &[0.0, 30.0], 1e-12, 1000).unwrap();
        assert!((v - (1.0 - (-30f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_closed_value() {
        let v = quadrature_expected_relu(&[1.0], &[0.0], &[1.0], 1e-10).unwrap();
        assert!((v - 0.398_942_280_4).abs() < 1e-10, "{v}");
    }

    #[test]
    fn narrow_component_limit() {
        let v = quadrature_expected_relu(&[1.0], &[5.0], &[1e-12], 1e-10).unwrap();
        assert!((v - 5.0).abs() < 1e-9, "{v}");
        let v = quadrature_expected_relu(&[1.0], &[5.0], &[0.0], 1e-10).unwrap();
        assert_eq!(v, 5.0);
        let v = quadrature_expected_relu(&[1.0], &[-5.0], &[1e-12], 1e-10).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn argument_checks() {
        assert!(quadrature_expected_relu(&[1.0], &[0.0], &[1.0], 0.0).is_err());
        assert!(quadrature_expected_relu(&[1.0], &[0.0], &[-1.0], 1e-8).is_err());
        assert!(quadrature_expected_relu(&[1.0], &[0.0, 1.0], &[1.0], 1e-8).is_err());
    }

    #[test]
    fn scalar_monte_carlo_is_reproducible() {
        let a = mc_expected_relu_scalar(&[0.3, 0.7], &[-1.0, 2.0], &[0.5, 1.5], 10_000, 4).unwrap();
        let b = mc_expected_relu_scalar(&[0.3, 0.7], &[-1.0, 2.0], &[0.5, 1.5], 10_000, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.1 > 0.0);
    }

    #[test]
    fn report_handles_constant_coordinates() {
        let moments = McMoments {
            n_samples: 1000,
            mean: vec![1.0, 0.0, 2.0],
            se: vec![0.0, 0.0, 0.1],
            pre_std: vec![0.0, 0.0, 0.5],
        };
        let report = OracleReport::new(vec![1.0 + 1e-14, 1e-3, 2.05], &moments).unwrap();
        assert_eq!(report.z[0], 0.0);
        assert!(report.z[1].is_finite() && report.z[1] > 1e6);
        assert!((report.z[2] - 0.5).abs() < 1e-9);
        assert!(!report.passes());
        assert!(report
            .to_csv()
            .starts_with("coord,analytic,empirical,se,z\n"));
    }
}
