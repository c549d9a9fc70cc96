//! Mixtures of factor analyzers.
//!
//! A factor analyzer is a Gaussian over ℝⁿ with covariance `A·Aᵀ + diag(d)`, where the loading
//! matrix `A` is `n × l` with `l` much smaller than `n`. All density and conditioning routines
//! work on the `l × l` core `I + Aᵀ·diag(d)⁻¹·A` and never form an `n × n` matrix.

mod condition;
mod io;
mod lowrank;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::rng::seeded_rng;

pub use condition::{condition, conditional_mean_imputation};
pub use io::{read_model, read_model_from, write_model, write_model_to};
pub(crate) use lowrank::{factor_core, LowRankTerms};

/// Tolerance on `Σ weights = 1` accepted when building a model.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Posterior weights below this are flushed to zero.
pub const WEIGHT_FLUSH: f64 = 1e-300;

/// One Gaussian component with low-rank-plus-diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorAnalyzer {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    noise: DVector<f64>,
}

impl FactorAnalyzer {
    /// `loadings` is `n × l` (columns are the factor vectors), `noise` holds the diagonal variances.
    pub fn new(mean: DVector<f64>, loadings: DMatrix<f64>, noise: DVector<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "factor analyzer needs n >= 1".into(),
            ));
        }
        check_dim("loading rows", n, loadings.nrows())?;
        check_dim("noise length", n, noise.len())?;
        if noise.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise variances must be finite and >= 0".into(),
            ));
        }
        if mean.iter().chain(loadings.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean or loading".into()));
        }
        Ok(Self {
            mean,
            loadings,
            noise,
        })
    }

    /// Diagonal Gaussian (`l = 0`).
    pub fn diagonal(mean: DVector<f64>, noise: DVector<f64>) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::zeros(n, 0), noise)
    }

    /// Point mass at `x`.
    pub fn point_mass(x: DVector<f64>, rank: usize) -> Result<Self> {
        let n = x.len();
        Self::new(x, DMatrix::zeros(n, rank), DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    /// Dense covariance. Only meant for tests and small problems.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose() + DMatrix::from_diagonal(&self.noise)
    }

    /// Per-coordinate marginal variance `d_j + Σ_c A[j,c]²`.
    pub fn marginal_variance(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| {
            self.noise[j] + self.loadings.row(j).iter().map(|v| v * v).sum::<f64>()
        })
    }

    /// `log N(x; μ, A·Aᵀ + diag(d))` via the Woodbury and determinant identities.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim("sample length", self.dim(), x.len())?;
        if let Some(j) = self.noise.iter().position(|&v| v <= 0.0) {
            return Err(Error::DegenerateDensity(format!(
                "noise variance at coordinate {j} is not strictly positive"
            )));
        }
        let terms = LowRankTerms::accumulate(self, x, 0..self.dim());
        let core = factor_core(terms.core.clone())?;
        Ok(terms.log_density(&core))
    }

    /// Draws `μ + √d ⊙ X + Σ_j Y_j·a_j` with `X ~ N(0, I_n)`, `Y ~ N(0, I_l)`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = self.mean.clone();
        for (o, &d) in out.iter_mut().zip(self.noise.iter()) {
            let x: f64 = StandardNormal.sample(rng);
            *o += d.sqrt() * x;
        }
        for factor in self.loadings.column_iter() {
            let y: f64 = StandardNormal.sample(rng);
            out.axpy(y, &factor, 1.0);
        }
        out
    }

    pub fn sample(&self, seed: u64) -> DVector<f64> {
        self.sample_with(&mut seeded_rng(seed))
    }
}

/// A finite mixture of factor analyzers sharing `n` and `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaModel {
    components: Vec<FactorAnalyzer>,
    weights: Vec<f64>,
}

impl MfaModel {
    /// Weights must be nonnegative and sum to one within [`WEIGHT_SUM_TOL`]; they are rescaled to
    /// sum to one exactly (up to rounding).
    pub fn new(components: Vec<FactorAnalyzer>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs k >= 1".into()));
        }
        check_dim("number of weights", components.len(), weights.len())?;
        let n = components[0].dim();
        let l = components[0].rank();
        for c in &components[1..] {
            check_dim("component dimension", n, c.dim())?;
            check_dim("component rank", l, c.rank())?;
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "mixture weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn single(component: FactorAnalyzer) -> Self {
        Self {
            components: vec![component],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn rank(&self) -> usize {
        self.components[0].rank()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[FactorAnalyzer] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture mean `Σ p_i μ_i`.
    pub fn mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (c, &w) in self.components.iter().zip(&self.weights) {
            out.axpy(w, c.mean(), 1.0);
        }
        out
    }

    /// `log Σ_i p_i N(x; μ_i, Σ_i)` evaluated with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.components.len());
        for (c, &w) in self.components.iter().zip(&self.weights) {
            let ll = c.log_density(x)?;
            terms.push(if w > 0.0 {
                w.ln() + ll
            } else {
                f64::NEG_INFINITY
            });
        }
        Ok(log_sum_exp(&terms))
    }

    /// Picks a component by a categorical draw over the weights, then samples it.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let i = self.draw_component(rng);
        self.components[i].sample_with(rng)
    }

    pub fn sample(&self, seed: u64) -> DVector<f64> {
        self.sample_with(&mut seeded_rng(seed))
    }

    pub(crate) fn draw_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.components.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

/// An image whose pixels are either observed or missing.
///
/// Pixels are stored channel-major (`C × H × W`). Missing pixels always hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pixels: Vec<f64>,
    observed: Vec<bool>,
}

impl MaskedImage {
    pub fn new(mut pixels: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        check_dim("mask length", pixels.len(), observed.len())?;
        for (p, &o) in pixels.iter_mut().zip(&observed) {
            if !o {
                *p = 0.0;
            }
        }
        Ok(Self { pixels, observed })
    }

    pub fn complete(pixels: Vec<f64>) -> Self {
        let observed = vec![true; pixels.len()];
        Self { pixels, observed }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn num_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn num_missing(&self) -> usize {
        self.len() - self.num_observed()
    }

    /// Same pixels, with `missing[j] == true` additionally hidden.
    pub fn with_missing(&self, missing: &[bool]) -> Result<Self> {
        check_dim("mask length", self.len(), missing.len())?;
        let observed = self
            .observed
            .iter()
            .zip(missing)
            .map(|(&o, &m)| o && !m)
            .collect();
        Self::new(self.pixels.clone(), observed)
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn toy_fa() -> FactorAnalyzer {
        FactorAnalyzer::new(
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
            DMatrix::from_column_slice(3, 1, &[0.5, 0.1, -0.4]),
            DVector::from_vec(vec![0.2, 0.3, 0.1]),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mode() {
        let fa =
            FactorAnalyzer::diagonal(DVector::zeros(1), DVector::from_element(1, 1.0)).unwrap();
        let model = MfaModel::single(fa);
        let ll = model.log_density(&[0.0]).unwrap();
        assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_component_collapses() {
        let fa = toy_fa();
        let single = MfaModel::single(fa.clone());
        let double = MfaModel::new(vec![fa.clone(), fa], vec![0.5, 0.5]).unwrap();
        let x = [0.3, 0.1, -0.2];
        let a = single.log_density(&x).unwrap();
        let b = double.log_density(&x).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn degenerate_noise_is_rejected() {
        let fa = FactorAnalyzer::point_mass(DVector::zeros(2), 1).unwrap();
        assert!(matches!(
            fa.log_density(&[0.0, 0.0]),
            Err(Error::DegenerateDensity(_))
        ));
        assert!(matches!(
            toy_fa().log_density(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn point_mass_samples_its_mean() {
        let mu = DVector::from_vec(vec![0.25, 0.5, 0.75]);
        let fa = FactorAnalyzer::point_mass(mu.clone(), 2).unwrap();
        for seed in 0..20 {
            assert_eq!(fa.sample(seed), mu);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let fa = toy_fa();
        assert_eq!(fa.sample(3), fa.sample(3));
        assert_ne!(fa.sample(3), fa.sample(4));
    }

    #[test]
    fn zero_weight_component_is_never_drawn() {
        let a = FactorAnalyzer::point_mass(DVector::from_element(1, 0.0), 0).unwrap();
        let b = FactorAnalyzer::point_mass(DVector::from_element(1, 1.0), 0).unwrap();
        let model = MfaModel::new(vec![a, b], vec![1.0, 0.0]).unwrap();
        for seed in 0..2000 {
            assert_eq!(model.sample(seed)[0], 0.0);
        }
    }

    #[test]
    fn single_component_mixture_matches_component_sampler() {
        let fa = toy_fa();
        let model = MfaModel::single(fa.clone());
        assert_eq!(model.sample(11), fa.sample(11));
    }

    #[test]
    fn invalid_weights_rejected() {
        let fa = toy_fa();
        assert!(MfaModel::new(vec![fa.clone(), fa.clone()], vec![0.5, 0.6]).is_err());
        assert!(MfaModel::new(vec![fa.clone(), fa], vec![1.5, -0.5]).is_err());
        assert!(MfaModel::new(vec![], vec![]).is_err());
    }

    #[test]
    fn masked_image_canonicalizes_missing() {
        let img = MaskedImage::new(vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        assert_eq!(img.pixels(), &[1.0, 0.0, 3.0]);
        assert_eq!(img.num_missing(), 1);
    }
}
