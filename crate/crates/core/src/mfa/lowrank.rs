use std::f64::consts::PI;

use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};

use super::FactorAnalyzer;
use crate::error::{Error, Result};

const CORE_JITTER: f64 = 1e-10;

/// Sufficient terms of a factor analyzer restricted to a coordinate subset `S`, for a residual
/// `r = x_S − μ_S`:
/// core `I + A_Sᵀ D_S⁻¹ A_S`, projection `A_Sᵀ D_S⁻¹ r`, `rᵀ D_S⁻¹ r` and `log det D_S`.
pub(crate) struct LowRankTerms {
    pub core: DMatrix<f64>,
    pub projection: DVector<f64>,
    pub weighted_sq: f64,
    pub log_det_noise: f64,
    pub count: usize,
}

impl LowRankTerms {
    /// Caller guarantees `d_j > 0` for every `j` in `coords`.
    pub fn accumulate(
        fa: &FactorAnalyzer,
        x: &[f64],
        coords: impl IntoIterator<Item = usize>,
    ) -> Self {
        let l = fa.rank();
        let a = fa.loadings();
        let mut core = DMatrix::<f64>::identity(l, l);
        let mut projection = DVector::<f64>::zeros(l);
        let mut weighted_sq = 0.0;
        let mut log_det_noise = 0.0;
        let mut count = 0;
        let mut row = vec![0.0; l];
        for j in coords {
            let d = fa.noise()[j];
            let r = x[j] - fa.mean()[j];
            let inv = 1.0 / d;
            weighted_sq += r * r * inv;
            log_det_noise += d.ln();
            count += 1;
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[(j, c)];
            }
            for c in 0..l {
                let s = row[c] * inv;
                projection[c] += s * r;
                for c2 in 0..=c {
                    core[(c, c2)] += s * row[c2];
                }
            }
        }
        for c in 0..l {
            for c2 in 0..c {
                core[(c2, c)] = core[(c, c2)];
            }
        }
        Self {
            core,
            projection,
            weighted_sq,
            log_det_noise,
            count,
        }
    }

    pub fn log_density(&self, core: &Cholesky<f64, Dyn>) -> f64 {
        let solved = core.solve(&self.projection);
        let quad = self.weighted_sq - self.projection.dot(&solved);
        let log_det_core: f64 = 2.0
            * core
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        -0.5 * (self.count as f64 * (2.0 * PI).ln() + self.log_det_noise + log_det_core + quad)
    }
}

/// Cholesky factor of a symmetric positive definite `l × l` core. The matrix is symmetrized
/// first; one retry with `1e-10·I` added is allowed.
pub(crate) fn factor_core(mut core: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let l = core.nrows();
    for i in 0..l {
        for j in 0..i {
            let avg = 0.5 * (core[(i, j)] + core[(j, i)]);
            core[(i, j)] = avg;
            core[(j, i)] = avg;
        }
    }
    if let Some(chol) = core.clone().cholesky() {
        return Ok(chol);
    }
    for i in 0..l {
        core[(i, i)] += CORE_JITTER;
    }
    core.cholesky()
        .ok_or_else(|| Error::DegenerateDensity("low-rank core is not positive definite".into()))
}
