use nalgebra::{DMatrix, DVector};

use super::{
    factor_core, log_sum_exp, FactorAnalyzer, LowRankTerms, MaskedImage, MfaModel, WEIGHT_FLUSH,
};
use crate::error::{check_dim, Error, Result};

/// Distribution of the missing pixels given the observed ones, embedded in the full ℝⁿ.
///
/// Each output component is a point mass on observed coordinates (mean `x_o`, zero noise, zero
/// loading rows) and the Gaussian conditional on missing ones, with covariance kept in factor
/// form `diag(d_m) + (A_m L)(A_m L)ᵀ` where `L Lᵀ = (I + A_oᵀ D_o⁻¹ A_o)⁻¹`. Weights become the
/// posterior responsibilities of the observed pixels.
///
/// Observed coordinates on which a component is already a point mass (zero noise and zero
/// loading row, as produced by this function) carry no likelihood: they must equal the
/// component mean exactly, otherwise the component gets zero posterior weight. This makes
/// conditioning idempotent.
pub fn condition(model: &MfaModel, img: &MaskedImage) -> Result<MfaModel> {
    check_dim("image length", model.dim(), img.len())?;
    if img.num_observed() == 0 {
        return Err(Error::ConditioningFailure(
            "image has no observed pixels".into(),
        ));
    }

    let mut components = Vec::with_capacity(model.num_components());
    let mut log_weights = Vec::with_capacity(model.num_components());
    for (fa, &p) in model.components().iter().zip(model.weights()) {
        let (component, log_lik) = condition_component(fa, img)?;
        components.push(component);
        log_weights.push(if p > 0.0 {
            p.ln() + log_lik
        } else {
            f64::NEG_INFINITY
        });
    }

    let total = log_sum_exp(&log_weights);
    if !total.is_finite() {
        return Err(Error::ConditioningFailure(format!(
            "observed pixels have zero likelihood under every component (log-normalizer {total})"
        )));
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - total).exp()).collect();
    for w in weights.iter_mut() {
        if *w < WEIGHT_FLUSH {
            *w = 0.0;
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(MfaModel {
        components,
        weights,
    })
}

fn condition_component(fa: &FactorAnalyzer, img: &MaskedImage) -> Result<(FactorAnalyzer, f64)> {
    let n = fa.dim();
    let l = fa.rank();
    let x = img.pixels();
    let observed = img.observed();
    let a = fa.loadings();
    let d = fa.noise();
    let mu = fa.mean();

    let mut stochastic = Vec::with_capacity(n);
    let mut impossible = false;
    for j in (0..n).filter(|&j| observed[j]) {
        let zero_row = (0..l).all(|c| a[(j, c)] == 0.0);
        if d[j] > 0.0 {
            stochastic.push(j);
        } else if zero_row {
            if x[j] != mu[j] {
                impossible = true;
            }
        } else {
            return Err(Error::DegenerateDensity(format!(
                "zero noise variance on observed coordinate {j} with nonzero loadings"
            )));
        }
    }

    let terms = LowRankTerms::accumulate(fa, x, stochastic.iter().copied());
    let core = factor_core(terms.core.clone())?;
    let log_lik = if impossible {
        f64::NEG_INFINITY
    } else {
        terms.log_density(&core)
    };

    // Σ_mo Σ_oo⁻¹ (x_o − μ_o) = A_m C⁻¹ A_oᵀ D_o⁻¹ (x_o − μ_o)
    let shift = core.solve(&terms.projection);
    // With C = R Rᵀ, L = R⁻ᵀ satisfies L Lᵀ = C⁻¹.
    let r_inv = core
        .l()
        .solve_lower_triangular(&DMatrix::identity(l, l))
        .ok_or_else(|| Error::DegenerateDensity("singular Cholesky factor".into()))?;
    let l_factor = r_inv.lower_triangle().transpose();

    let mut mean = DVector::zeros(n);
    let mut loadings = DMatrix::zeros(n, l);
    let mut noise = DVector::zeros(n);
    for j in 0..n {
        if observed[j] {
            mean[j] = x[j];
            continue;
        }
        let mut m = mu[j];
        for c in 0..l {
            m += a[(j, c)] * shift[c];
        }
        mean[j] = m;
        for c in 0..l {
            let mut v = 0.0;
            for c2 in 0..=c {
                v += a[(j, c2)] * l_factor[(c2, c)];
            }
            loadings[(j, c)] = v;
        }
        noise[j] = d[j];
    }
    let component = FactorAnalyzer {
        mean,
        loadings,
        noise,
    };
    Ok((component, log_lik))
}

/// Responsibility-weighted mean of the conditioned mixture. Observed pixels pass through exactly.
pub fn conditional_mean_imputation(model: &MfaModel, img: &MaskedImage) -> Result<DVector<f64>> {
    let conditioned = condition(model, img)?;
    let mut out = conditioned.mean();
    for (j, &o) in img.observed().iter().enumerate() {
        if o {
            out[j] = img.pixels()[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_model() -> MfaModel {
        let fa = FactorAnalyzer::diagonal(
            DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]),
            DVector::from_vec(vec![0.5, 0.6, 0.7, 0.8]),
        )
        .unwrap();
        MfaModel::single(fa)
    }

    fn rank_two_mixture() -> MfaModel {
        let a = FactorAnalyzer::new(
            DVector::from_vec(vec![0.1, 0.5, -0.3, 0.2, 0.0]),
            DMatrix::from_column_slice(5, 2, &[0.3, -0.2, 0.5, 0.1, 0.4, 0.2, 0.1, -0.3, 0.6, 0.2]),
            DVector::from_vec(vec![0.2, 0.1, 0.3, 0.25, 0.15]),
        )
        .unwrap();
        let b = FactorAnalyzer::new(
            DVector::from_vec(vec![-0.4, 0.1, 0.2, 0.6, 0.3]),
            DMatrix::from_column_slice(5, 2, &[0.1, 0.1, -0.5, 0.3, 0.2, -0.2, 0.4, 0.3, 0.1, 0.5]),
            DVector::from_vec(vec![0.3, 0.2, 0.1, 0.2, 0.35]),
        )
        .unwrap();
        MfaModel::new(vec![a, b], vec![0.4, 0.6]).unwrap()
    }

    #[test]
    fn diagonal_gaussian_conditioning_is_independent() {
        let model = diag_model();
        let img =
            MaskedImage::new(vec![0.9, 0.0, 0.0, -0.3], vec![true, false, false, true]).unwrap();
        let cond = condition(&model, &img).unwrap();
        let c = &cond.components()[0];
        assert_eq!(c.mean().as_slice(), &[0.9, 0.2, 0.3, -0.3]);
        assert_eq!(c.noise().as_slice(), &[0.0, 0.6, 0.7, 0.0]);
        let imputed = conditional_mean_imputation(&model, &img).unwrap();
        assert_eq!(imputed.as_slice(), &[0.9, 0.2, 0.3, -0.3]);
    }

    #[test]
    fn fully_observed_gives_point_masses() {
        let model = rank_two_mixture();
        let x = vec![0.2, 0.3, -0.1, 0.5, 0.1];
        let img = MaskedImage::complete(x.clone());
        let cond = condition(&model, &img).unwrap();
        let log_terms: Vec<f64> = model
            .components()
            .iter()
            .zip(model.weights())
            .map(|(c, w)| w.ln() + c.log_density(&x).unwrap())
            .collect();
        let total = log_sum_exp(&log_terms);
        for (i, c) in cond.components().iter().enumerate() {
            assert_eq!(c.mean().as_slice(), x.as_slice());
            assert!(c.noise().iter().all(|&v| v == 0.0));
            assert!(c.loadings().iter().all(|&v| v == 0.0));
            assert!((cond.weights()[i] - (log_terms[i] - total).exp()).abs() < 1e-14);
        }
        let imputed = conditional_mean_imputation(&model, &img).unwrap();
        assert_eq!(imputed.as_slice(), x.as_slice());
    }

    #[test]
    fn observed_rows_are_exact_zeros() {
        let model = rank_two_mixture();
        let img = MaskedImage::new(
            vec![0.2, 0.3, -0.1, 0.5, 0.1],
            vec![true, false, true, false, true],
        )
        .unwrap();
        let cond = condition(&model, &img).unwrap();
        for c in cond.components() {
            for j in [0, 2, 4] {
                assert_eq!(c.noise()[j].to_bits(), 0);
                assert!(c.loadings().row(j).iter().all(|v| v.to_bits() == 0));
                assert_eq!(c.mean()[j], img.pixels()[j]);
            }
        }
        let s: f64 = cond.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditioning_is_idempotent() {
        let model = rank_two_mixture();
        let img = MaskedImage::new(
            vec![0.2, 0.3, -0.1, 0.5, 0.1],
            vec![false, true, true, false, true],
        )
        .unwrap();
        let once = condition(&model, &img).unwrap();
        let twice = condition(&once, &img).unwrap();
        for (a, b) in once.weights().iter().zip(twice.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in once.components().iter().zip(twice.components()) {
            assert!((a.mean() - b.mean()).amax() < 1e-12);
            assert!((a.noise() - b.noise()).amax() < 1e-12);
            assert!((a.covariance() - b.covariance()).amax() < 1e-12);
        }
    }

    #[test]
    fn no_observed_pixels_is_an_error() {
        let model = diag_model();
        let img = MaskedImage::new(vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(
            condition(&model, &img),
            Err(Error::ConditioningFailure(_))
        ));
    }

    #[test]
    fn impossible_point_mass_observation_fails() {
        let fa = FactorAnalyzer::point_mass(DVector::from_vec(vec![0.5, 0.5]), 0).unwrap();
        let model = MfaModel::single(fa);
        let img = MaskedImage::new(vec![0.1, 0.0], vec![true, false]).unwrap();
        assert!(matches!(
            condition(&model, &img),
            Err(Error::ConditioningFailure(_))
        ));
    }
}
