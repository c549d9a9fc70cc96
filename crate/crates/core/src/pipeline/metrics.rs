//! Classification and imputation scores.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Result};
use crate::mfa::{condition, log_sum_exp, MaskedImage, MfaModel};

/// Reported PSNR when the error vanishes.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(1/mse)` for intensities in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// NaN for classes absent from the labels.
    pub per_class_accuracy: Vec<f64>,
}

pub fn classification_metrics(
    predicted: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassificationMetrics> {
    check_dim("prediction count", labels.len(), predicted.len())?;
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if y < num_classes {
            totals[y] += 1;
            hits[y] += (p == y) as usize;
        }
    }
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| {
                if t == 0 {
                    f64::NAN
                } else {
                    h as f64 / t as f64
                }
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputationMetrics {
    /// Mean squared error over all missing pixels.
    pub mse: f64,
    pub psnr: f64,
    /// Mean over images of the negative log-density of the true missing block.
    pub nll: f64,
    pub missing_pixels: usize,
}

/// Squared error over missing pixels and their count.
pub fn missing_squared_error(imputed: &[f64], img: &MaskedImage, truth: &[f64]) -> (f64, usize) {
    let mut sse = 0.0;
    let mut count = 0;
    for ((&v, &t), &o) in imputed.iter().zip(truth).zip(img.observed()) {
        if !o {
            sse += (v - t) * (v - t);
            count += 1;
        }
    }
    (sse, count)
}

/// `−log p(x_missing | x_observed)` under an already conditioned model; `+∞` when a covariance
/// block is not positive definite.
pub fn missing_block_nll(conditioned: &MfaModel, img: &MaskedImage, truth: &[f64]) -> f64 {
    let miss: Vec<usize> = (0..img.len()).filter(|&j| !img.observed()[j]).collect();
    if miss.is_empty() {
        return 0.0;
    }
    let m = miss.len();
    let mut terms = Vec::with_capacity(conditioned.num_components());
    for (fa, &w) in conditioned.components().iter().zip(conditioned.weights()) {
        if w <= 0.0 {
            continue;
        }
        let a = DMatrix::from_fn(m, fa.rank(), |r, c| fa.loadings()[(miss[r], c)]);
        let mut cov = &a * a.transpose();
        for (r, &j) in miss.iter().enumerate() {
            cov[(r, r)] += fa.noise()[j];
        }
        let Some(chol) = cov.cholesky() else {
            log::warn!("missing-block covariance is not positive definite, NLL is +inf");
            return f64::INFINITY;
        };
        let r = DVector::from_fn(m, |i, _| truth[miss[i]] - fa.mean()[miss[i]]);
        let z = chol
            .l()
            .solve_lower_triangular(&r)
            .expect("nonsingular factor");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        terms.push(w.ln() - 0.5 * (m as f64 * (2.0 * PI).ln() + log_det + z.norm_squared()));
    }
    -log_sum_exp(&terms)
}

/// Conditional-mean imputation scored on the missing pixels of each image.
pub fn evaluate_imputation(
    model: &MfaModel,
    masked: &[MaskedImage],
    truth: &[&[f64]],
) -> Result<ImputationMetrics> {
    check_dim("ground-truth count", masked.len(), truth.len())?;
    let per_image = masked
        .par_iter()
        .zip(truth.par_iter())
        .map(|(img, t)| -> Result<(f64, usize, f64)> {
            check_dim("ground-truth length", img.len(), t.len())?;
            if img.num_missing() == 0 {
                return Ok((0.0, 0, 0.0));
            }
            let cond = condition(model, img)?;
            let mean = cond.mean();
            let (sse, count) = missing_squared_error(mean.as_slice(), img, t);
            Ok((sse, count, missing_block_nll(&cond, img, t)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut sse, mut count, mut nll) = (0.0, 0, 0.0);
    for (s, c, n) in per_image {
        sse += s;
        count += c;
        nll += n;
    }
    let mse = if count == 0 { 0.0 } else { sse / count as f64 };
    Ok(ImputationMetrics {
        mse,
        psnr: psnr(mse),
        nll: nll / masked.len().max(1) as f64,
        missing_pixels: count,
    })
}

/// MSE and PSNR of zero imputation over the missing pixels.
pub fn zero_imputation_error(masked: &[MaskedImage], truth: &[&[f64]]) -> Result<(f64, f64)> {
    check_dim("ground-truth count", masked.len(), truth.len())?;
    let (mut sse, mut count) = (0.0, 0);
    for (img, t) in masked.iter().zip(truth) {
        check_dim("ground-truth length", img.len(), t.len())?;
        let (s, c) = missing_squared_error(img.pixels(), img, t);
        sse += s;
        count += c;
    }
    let mse = if count == 0 { 0.0 } else { sse / count as f64 };
    Ok((mse, psnr(mse)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfa::FactorAnalyzer;

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(0.0), PSNR_CAP_DB);
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr(1.0)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_and_per_class() {
        let m = classification_metrics(&[0, 1, 1, 2], &[0, 1, 2, 2], 4).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(&m.per_class_accuracy[..3], &[1.0, 1.0, 0.5]);
        assert!(m.per_class_accuracy[3].is_nan());
    }

    #[test]
    fn perfect_imputation_hits_the_cap() {
        let mu = vec![0.1, 0.5, 0.9, 0.3];
        let model = MfaModel::single(
            FactorAnalyzer::diagonal(DVector::from_vec(mu.clone()), DVector::from_element(4, 0.2))
                .unwrap(),
        );
        let img = MaskedImage::new(mu.clone(), vec![true, false, false, true]).unwrap();
        let m = evaluate_imputation(&model, &[img], &[&mu]).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, PSNR_CAP_DB);
        assert_eq!(m.missing_pixels, 2);
    }

    #[test]
    fn zero_imputation_of_zero_pixels() {
        let truth = vec![0.7, 0.0, 0.0, 0.2];
        let img = MaskedImage::new(truth.clone(), vec![true, false, false, true]).unwrap();
        let (mse, p) = zero_imputation_error(&[img], &[&truth]).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(p, PSNR_CAP_DB);
    }

    #[test]
    fn diagonal_nll_is_sum_of_scalar_terms() {
        let mu = [0.2, 0.4, 0.6, 0.8, 0.1];
        let var = [0.05, 0.1, 0.2, 0.3, 0.07];
        let model = MfaModel::single(
            FactorAnalyzer::diagonal(DVector::from_row_slice(&mu), DVector::from_row_slice(&var))
                .unwrap(),
        );
        let truth = [0.3, 0.9, 0.1, 0.5, 0.0];
        let observed = vec![true, false, true, false, false];
        let img = MaskedImage::new(truth.to_vec(), observed.clone()).unwrap();
        let m = evaluate_imputation(&model, &[img], &[&truth]).unwrap();
        let expected: f64 = (0..5)
            .filter(|&j| !observed[j])
            .map(|j| {
                let r = truth[j] - mu[j];
                0.5 * ((2.0 * PI * var[j]).ln() + r * r / var[j])
            })
            .sum();
        assert!((m.nll - expected).abs() < 1e-9, "{} vs {expected}", m.nll);
    }
}
