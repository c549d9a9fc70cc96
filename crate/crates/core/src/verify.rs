//! Randomized oracle suite: closed-form layer against Monte-Carlo, rectified-Gaussian
//! mean against quadrature.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::variants::{
    expected_relu_with, misconv_forward_variant, NoiseVariance, RectifiedMean,
};
use crate::layer::{Activation, InputShape, KernelStack};
use crate::mfa::{condition, FactorAnalyzer, MaskedImage, MfaModel};
use crate::oracle::{compare_with_monte_carlo, quadrature_expected_relu, OracleReport};
use crate::rng::{derive_seed, seeded_rng, SeededRng};

/// Largest z-score tolerated anywhere in the suite.
pub const MAX_Z: f64 = 5.0;
/// Absolute agreement required between the closed form and quadrature.
pub const QUADRATURE_TOL: f64 = 1e-8;
/// Largest deviation of conditional means and covariances from dense conditioning.
pub const CONDITIONING_TOL: f64 = 1e-8;
/// Largest deviation of posterior component weights from dense conditioning.
pub const WEIGHT_TOL: f64 = 1e-10;

/// A conditioned mixture and a kernel stack small enough for dense sampling.
#[derive(Debug, Clone)]
pub struct IdentityCase {
    pub model: MfaModel,
    pub kernels: KernelStack,
    pub input: InputShape,
}

/// Random single-channel image of side 3..=8, prior with `k ≤ 3`, `l ≤ 4`, random mask and
/// mixed-sign kernels with bias.
pub fn random_identity_case(seed: u64) -> Result<IdentityCase> {
    let mut rng = seeded_rng(seed);
    let input = InputShape::new(1, rng.random_range(3..=8), rng.random_range(3..=8));
    let n = input.len();
    let k = rng.random_range(1..=3);
    let l = rng.random_range(0..=4);
    let loading = Normal::new(0.0, 0.2).expect("valid std");
    let comps = (0..k)
        .map(|_| {
            FactorAnalyzer::new(
                DVector::from_fn(n, |_, _| rng.random_range(-0.5..1.0)),
                DMatrix::from_fn(n, l, |_, _| loading.sample(&mut rng)),
                DVector::from_fn(n, |_, _| rng.random_range(0.01..0.1)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let prior = MfaModel::new(comps, raw.iter().map(|w| w / total).collect())?;

    let truth = prior.sample_with(&mut rng);
    let hide = rng.random_range(0.2..0.7);
    let mut observed: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= hide).collect();
    observed[rng.random_range(0..n)] = true;
    let img = MaskedImage::new(truth.as_slice().to_vec(), observed)?;
    let model = condition(&prior, &img)?;

    let kernels = random_kernels(&mut rng, input)?;
    Ok(IdentityCase {
        model,
        kernels,
        input,
    })
}

fn random_kernels(rng: &mut SeededRng, input: InputShape) -> Result<KernelStack> {
    let filters = rng.random_range(1..=3);
    let fit = |side: usize| if side >= 5 { 5 } else { 3 };
    let kh = [1, 3, 3, 5][rng.random_range(0..4)].min(fit(input.height));
    let kw = [1, 3, 3, 5][rng.random_range(0..4)].min(fit(input.width));
    let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
    let padding = (rng.random_range(0..=kh / 2), rng.random_range(0..=kw / 2));
    let normal = Normal::new(0.0, (2.0 / (kh * kw) as f64).sqrt()).expect("valid std");
    let weights = (0..filters * kh * kw).map(|_| normal.sample(rng)).collect();
    let bias = (0..filters).map(|_| rng.random_range(-0.3..0.3)).collect();
    KernelStack::new(filters, 1, kh, kw, weights, bias, stride, padding)
}

/// Random 1-D Gaussian mixture `(weights, means, stds)` with `k ≤ 3`; every fourth one has a
/// component with `σ` zero or vanishingly small.
pub fn random_mixture(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = seeded_rng(seed);
    let k = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut stds: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..3.0)).collect();
    if seed.is_multiple_of(4) {
        stds[0] = [0.0, 1e-12, 1e-9, 1e-6][rng.random_range(0..4)];
    }
    (weights, means, stds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerVariant {
    pub noise: NoiseVariance,
    pub form: RectifiedMean,
}

impl LayerVariant {
    pub const EXACT: LayerVariant = LayerVariant {
        noise: NoiseVariance::SquaredWeights,
        form: RectifiedMean::Exact,
    };
}

/// Monte-Carlo report for one random case under `variant`.
pub fn identity_report(
    case_seed: u64,
    samples: usize,
    variant: LayerVariant,
) -> Result<OracleReport> {
    let case = random_identity_case(case_seed)?;
    let analytic = misconv_forward_variant(
        &case.model,
        &case.kernels,
        case.input,
        Activation::Relu,
        variant.noise,
        variant.form,
    )?;
    compare_with_monte_carlo(
        &analytic,
        &case.model,
        &case.kernels,
        case.input,
        Activation::Relu,
        samples,
        derive_seed(case_seed, 0xC0FFEE),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySuite {
    pub reports: Vec<OracleReport>,
}

impl IdentitySuite {
    pub fn max_z(&self) -> f64 {
        self.reports.iter().map(|r| r.max_z).fold(0.0, f64::max)
    }

    /// Every case has at most 1% of coordinates above 4 and none above [`MAX_Z`].
    pub fn passes(&self) -> bool {
        self.reports.iter().all(|r| r.passes() && r.max_z <= MAX_Z)
    }

    pub fn failing_cases(&self) -> usize {
        self.reports
            .iter()
            .filter(|r| !(r.passes() && r.max_z <= MAX_Z))
            .count()
    }
}

/// Runs `cases` random configurations; case `i` uses seed `derive_seed(seed, i)`.
pub fn identity_suite(
    cases: usize,
    samples: usize,
    seed: u64,
    variant: LayerVariant,
) -> Result<IdentitySuite> {
    let reports = (0..cases)
        .map(|i| identity_report(derive_seed(seed, i as u64), samples, variant))
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentitySuite { reports })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSuite {
    pub cases: usize,
    pub max_abs_error: f64,
    pub failures: usize,
}

impl QuadratureSuite {
    pub fn passes(&self) -> bool {
        self.failures == 0
    }
}

/// Closed form under `form` against quadrature on `cases` random mixtures.
pub fn quadrature_suite(cases: usize, seed: u64, form: RectifiedMean) -> Result<QuadratureSuite> {
    let errors = (0..cases)
        .into_par_iter()
        .map(|i| {
            let (w, m, s) = random_mixture(derive_seed(seed, i as u64));
            let quad = quadrature_expected_relu(&w, &m, &s, 1e-10)?;
            Ok((expected_relu_with(form, &w, &m, &s)? - quad).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(QuadratureSuite {
        cases,
        max_abs_error: errors.iter().copied().fold(0.0, f64::max),
        failures: errors.iter().filter(|&&e| !(e <= QUADRATURE_TOL)).count(),
    })
}

/// Random prior (`n ≤ 32`, `l ≤ 4`, `k ≤ 3`) and a partially observed sample from it.
pub fn random_conditioning_case(seed: u64) -> Result<(MfaModel, MaskedImage)> {
    let mut rng = seeded_rng(seed);
    let n = rng.random_range(2..=32);
    let l = rng.random_range(0..=4);
    let k = rng.random_range(1..=3);
    let loading = Normal::new(0.0, 0.5).expect("valid std");
    let comps = (0..k)
        .map(|_| {
            FactorAnalyzer::new(
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(n, l, |_, _| loading.sample(&mut rng)),
                DVector::from_fn(n, |_, _| rng.random_range(0.05..0.5)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let prior = MfaModel::new(comps, raw.iter().map(|w| w / total).collect())?;
    let x = prior.sample_with(&mut rng);
    let hide = rng.random_range(0.1..0.9);
    let mut observed: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= hide).collect();
    observed[rng.random_range(0..n)] = true;
    let img = MaskedImage::new(x.as_slice().to_vec(), observed)?;
    Ok((prior, img))
}

fn pick(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Largest `(moment, weight)` deviation of [`condition`] from conditioning each component's
/// dense covariance by the Schur complement.
pub fn dense_conditioning_error(prior: &MfaModel, img: &MaskedImage) -> Result<(f64, f64)> {
    let post = condition(prior, img)?;
    let n = img.len();
    let obs: Vec<usize> = (0..n).filter(|&j| img.observed()[j]).collect();
    let mis: Vec<usize> = (0..n).filter(|&j| !img.observed()[j]).collect();
    let x_o = pick(&DVector::from_column_slice(img.pixels()), &obs);
    let mut moment: f64 = 0.0;
    let mut log_w = Vec::with_capacity(prior.num_components());
    for ((fa, cond), &p) in prior
        .components()
        .iter()
        .zip(post.components())
        .zip(prior.weights())
    {
        let sigma = fa.covariance();
        let chol = block(&sigma, &obs, &obs).cholesky().ok_or_else(|| {
            Error::ConditioningFailure("observed block not positive definite".into())
        })?;
        let r = &x_o - pick(fa.mean(), &obs);
        let s_mo = block(&sigma, &mis, &obs);
        let mean_m = pick(fa.mean(), &mis) + &s_mo * chol.solve(&r);
        let cov_m = block(&sigma, &mis, &mis) - &s_mo * chol.solve(&s_mo.transpose());
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        log_w.push(
            p.ln() - 0.5 * (obs.len() as f64 * (2.0 * PI).ln() + log_det + r.dot(&chol.solve(&r))),
        );

        let got = cond.covariance();
        moment = moment.max((pick(cond.mean(), &mis) - mean_m).amax());
        moment = moment.max((block(&got, &mis, &mis) - cov_m).amax());
        for &j in &obs {
            moment = moment.max((cond.mean()[j] - img.pixels()[j]).abs());
            moment = moment.max(got.column(j).amax());
        }
    }
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = top + log_w.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    let weight = log_w
        .iter()
        .zip(post.weights())
        .map(|(lw, w)| ((lw - norm).exp() - w).abs())
        .fold(0.0, f64::max);
    Ok((moment, weight))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningSuite {
    pub cases: usize,
    pub max_moment_error: f64,
    pub max_weight_error: f64,
    pub failures: usize,
}

impl ConditioningSuite {
    pub fn passes(&self) -> bool {
        self.failures == 0
    }
}

/// [`condition`] against dense conditioning on `cases` random models.
pub fn conditioning_suite(cases: usize, seed: u64) -> Result<ConditioningSuite> {
    let errors = (0..cases)
        .into_par_iter()
        .map(|i| {
            let (prior, img) = random_conditioning_case(derive_seed(seed, i as u64))?;
            dense_conditioning_error(&prior, &img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditioningSuite {
        cases,
        max_moment_error: errors.iter().map(|e| e.0).fold(0.0, f64::max),
        max_weight_error: errors.iter().map(|e| e.1).fold(0.0, f64::max),
        failures: errors
            .iter()
            .filter(|(m, w)| !(*m <= CONDITIONING_TOL && *w <= WEIGHT_TOL))
            .count(),
    })
}
