//! Maximum-likelihood mixtures of factor analyzers by Expectation-Maximization.
//!
//! The E-step computes responsibilities and the posterior factor moments
//! `E[y|x] = C⁻¹ Aᵀ D⁻¹ (x − μ)` and `E[yyᵀ|x] = C⁻¹ + E[y]E[y]ᵀ` with `C = I + Aᵀ D⁻¹ A`.
//! The M-step solves jointly for the augmented loading `[A μ]` and then for the diagonal noise,
//! which is clamped from below at `d_floor`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mfa::{factor_core, FactorAnalyzer, MfaModel};
use crate::rng::{derive_seed, seeded_rng, SeededRng};

const CHUNK: usize = 512;
const EMPTY_MASS: f64 = 1e-8;
const MAX_RESEEDS: usize = 3;
const KMEANS_SUBSET: usize = 5000;
const KMEANS_ITERS: usize = 100;
const LOADING_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmInit {
    KMeans,
    RandomSubset,
}

impl FromStr for EmInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(EmInit::KMeans),
            "random-subset" => Ok(EmInit::RandomSubset),
            other => Err(Error::Config(format!("unknown EM init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub l: usize,
    pub max_iters: usize,
    /// Stop once the relative improvement of the mean log-likelihood falls below this.
    pub ll_tol: f64,
    pub d_floor: f64,
    pub seed: u64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 8,
            l: 4,
            max_iters: 200,
            ll_tol: 1e-6,
            d_floor: 1e-6,
            seed: 0,
            init: EmInit::KMeans,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.ll_tol >= 0.0) {
            return Err(Error::InvalidParameter("ll_tol must be >= 0".into()));
        }
        if !(self.d_floor > 0.0) {
            return Err(Error::InvalidParameter("d_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmReport {
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Iterations whose M-step re-seeded an empty component. The likelihood may drop right after.
    pub reseeded_at: Vec<usize>,
}

impl EmReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loglik\n");
        for (i, ll) in self.log_likelihood.iter().enumerate() {
            let _ = writeln!(out, "{i},{ll:.17e}");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Largest single-step decrease of the log-likelihood, ignoring steps right after a re-seed.
    pub fn worst_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .enumerate()
            .filter(|(i, _)| !self.reseeded_at.contains(i))
            .map(|(_, w)| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

struct Params {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    noise: DVector<f64>,
    weight: f64,
}

/// Per-component quantities reused by every sample in an E-step.
struct Prepared {
    log_weight: f64,
    inv_noise: DVector<f64>,
    log_norm: f64,
    core_inv: DMatrix<f64>,
}

#[derive(Clone)]
struct Stats {
    mass: f64,
    /// `Σ h x [E[y]ᵀ 1]`, `n × (l+1)`.
    cross: DMatrix<f64>,
    /// `Σ h E[[y;1][y;1]ᵀ]`, `(l+1) × (l+1)`.
    second: DMatrix<f64>,
    /// `Σ h x²`.
    sq: DVector<f64>,
}

impl Stats {
    fn zeros(n: usize, l: usize) -> Self {
        Self {
            mass: 0.0,
            cross: DMatrix::zeros(n, l + 1),
            second: DMatrix::zeros(l + 1, l + 1),
            sq: DVector::zeros(n),
        }
    }

    fn add(&mut self, other: &Stats) {
        self.mass += other.mass;
        self.cross += &other.cross;
        self.second += &other.second;
        self.sq += &other.sq;
    }
}

struct ChunkResult {
    log_lik: Vec<f64>,
    stats: Vec<Stats>,
}

/// Fits a `k`-component, rank-`l` mixture to complete samples.
pub fn fit<S: AsRef<[f64]>>(data: &[S], cfg: &EmConfig) -> Result<(MfaModel, EmReport)> {
    cfg.validate()?;
    let x = data_matrix(data)?;
    let (n, count) = x.shape();
    let needed = cfg.k * (cfg.l + 2);
    if count < needed {
        return Err(Error::InsufficientData(format!(
            "{count} samples, need at least k·(l+2) = {needed}"
        )));
    }

    let mut rng = seeded_rng(derive_seed(cfg.seed, 0));
    let global_var = column_variance(&x, cfg.d_floor);
    let mut params = match cfg.init {
        EmInit::KMeans => init_kmeans(&x, cfg, &global_var, &mut rng),
        EmInit::RandomSubset => init_random(&x, cfg, &global_var, &mut rng),
    };

    let mut report = EmReport {
        log_likelihood: Vec::new(),
        iterations_run: 0,
        converged: false,
        reseeded_at: Vec::new(),
    };
    let mut reseeds = vec![0usize; cfg.k];
    for iter in 0..cfg.max_iters {
        let prepared = prepare(&params)?;
        let (mean_ll, per_sample, stats) = e_step(&x, &params, &prepared);
        if !mean_ll.is_finite() {
            return Err(Error::EmFailure(format!(
                "log-likelihood became {mean_ll} at iteration {iter}"
            )));
        }
        report.iterations_run = iter + 1;
        let previous = report.log_likelihood.last().copied();
        report.log_likelihood.push(mean_ll);
        if let Some(prev) = previous {
            if mean_ll - prev < cfg.ll_tol * prev.abs() && !report.reseeded_at.contains(&(iter - 1))
            {
                report.converged = true;
                break;
            }
        }

        let mut reseeded = false;
        for (i, s) in stats.iter().enumerate() {
            if s.mass < EMPTY_MASS {
                reseeds[i] += 1;
                if reseeds[i] >= MAX_RESEEDS {
                    return Err(Error::EmFailure(format!(
                        "component {i} emptied {MAX_RESEEDS} times"
                    )));
                }
                let worst = per_sample
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(t, _)| t)
                    .expect("nonempty data");
                params[i] = Params {
                    mean: x.column(worst).into_owned(),
                    loadings: random_loadings(n, cfg.l, &mut rng),
                    noise: global_var.clone(),
                    weight: 1.0 / count as f64,
                };
                reseeded = true;
            } else {
                params[i] = m_step(s, count, cfg.d_floor);
            }
        }
        if reseeded {
            report.reseeded_at.push(iter);
            let total: f64 = params.iter().map(|p| p.weight).sum();
            params.iter_mut().for_each(|p| p.weight /= total);
        }
    }

    let total: f64 = params.iter().map(|p| p.weight).sum();
    let mut components = Vec::with_capacity(cfg.k);
    let mut weights = Vec::with_capacity(cfg.k);
    for p in params {
        weights.push(p.weight / total);
        components.push(FactorAnalyzer::new(p.mean, p.loadings, p.noise)?);
    }
    Ok((MfaModel::new(components, weights)?, report))
}

fn data_matrix<S: AsRef<[f64]>>(data: &[S]) -> Result<DMatrix<f64>> {
    let first = data
        .first()
        .ok_or_else(|| Error::InsufficientData("empty data set".into()))?;
    let n = first.as_ref().len();
    if n == 0 {
        return Err(Error::InvalidParameter("samples must have n >= 1".into()));
    }
    let mut flat = Vec::with_capacity(n * data.len());
    for (t, s) in data.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                what: "sample length",
                expected: n,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample {t} is not finite")));
        }
        flat.extend_from_slice(s);
    }
    Ok(DMatrix::from_vec(n, data.len(), flat))
}

fn column_variance(x: &DMatrix<f64>, floor: f64) -> DVector<f64> {
    let count = x.ncols() as f64;
    let mean = x.column_mean();
    DVector::from_fn(x.nrows(), |j, _| {
        let v = x.row(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / count;
        v.max(floor)
    })
}

fn random_loadings(n: usize, l: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, l, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        LOADING_INIT_SCALE * z
    })
}

fn init_random(
    x: &DMatrix<f64>,
    cfg: &EmConfig,
    global_var: &DVector<f64>,
    rng: &mut SeededRng,
) -> Vec<Params> {
    let mut picks = index::sample(rng, x.ncols(), cfg.k).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|t| Params {
            mean: x.column(t).into_owned(),
            loadings: random_loadings(x.nrows(), cfg.l, rng),
            noise: global_var.clone(),
            weight: 1.0 / cfg.k as f64,
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding and Lloyd iterations on a random subset of at most 5000 samples.
fn init_kmeans(
    x: &DMatrix<f64>,
    cfg: &EmConfig,
    global_var: &DVector<f64>,
    rng: &mut SeededRng,
) -> Vec<Params> {
    let n = x.nrows();
    let m = x.ncols().min(KMEANS_SUBSET);
    let mut subset = index::sample(rng, x.ncols(), m).into_vec();
    subset.sort_unstable();
    let points: Vec<&[f64]> = subset
        .iter()
        .map(|&t| &x.as_slice()[t * n..(t + 1) * n])
        .collect();

    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..m)].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < cfg.k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter()
                .position(|&d| {
                    acc += d;
                    u < acc
                })
                .unwrap_or(m - 1)
        } else {
            rng.random_range(0..m)
        };
        centers.push(points[pick].to_vec());
        let last = centers.last().unwrap();
        for (d, p) in dist.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, last));
        }
    }

    let mut assign = vec![usize::MAX; m];
    for _ in 0..KMEANS_ITERS {
        let next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; n]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..cfg.k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut counts = vec![0usize; cfg.k];
    let mut var = vec![vec![0.0; n]; cfg.k];
    for (p, &c) in points.iter().zip(&assign) {
        counts[c] += 1;
        for ((v, x), mu) in var[c].iter_mut().zip(p.iter()).zip(&centers[c]) {
            *v += (x - mu) * (x - mu);
        }
    }
    let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
    (0..cfg.k)
        .map(|c| {
            let noise = if counts[c] > 1 {
                DVector::from_iterator(
                    n,
                    var[c]
                        .iter()
                        .map(|v| (v / counts[c] as f64).max(cfg.d_floor)),
                )
            } else {
                global_var.clone()
            };
            Params {
                mean: DVector::from_vec(centers[c].clone()),
                loadings: random_loadings(n, cfg.l, rng),
                noise,
                weight: counts[c].max(1) as f64 / total,
            }
        })
        .collect()
}

fn prepare(params: &[Params]) -> Result<Vec<Prepared>> {
    params
        .iter()
        .map(|p| {
            let n = p.mean.len();
            let inv_noise = p.noise.map(|d| 1.0 / d);
            let scaled = DMatrix::from_fn(n, p.loadings.ncols(), |j, c| {
                p.loadings[(j, c)] * inv_noise[j]
            });
            let core = DMatrix::identity(p.loadings.ncols(), p.loadings.ncols())
                + p.loadings.transpose() * scaled;
            let chol = factor_core(core)?;
            let log_det = p.noise.iter().map(|d| d.ln()).sum::<f64>()
                + 2.0
                    * chol
                        .l_dirty()
                        .diagonal()
                        .iter()
                        .map(|v| v.ln())
                        .sum::<f64>();
            Ok(Prepared {
                log_weight: if p.weight > 0.0 {
                    p.weight.ln()
                } else {
                    f64::NEG_INFINITY
                },
                inv_noise,
                log_norm: -0.5 * (n as f64 * (2.0 * PI).ln() + log_det),
                core_inv: chol.inverse(),
            })
        })
        .collect()
}

/// Returns the mean log-likelihood, per-sample log-likelihoods and the summed statistics.
fn e_step(
    x: &DMatrix<f64>,
    params: &[Params],
    prepared: &[Prepared],
) -> (f64, Vec<f64>, Vec<Stats>) {
    let (n, count) = x.shape();
    let l = params[0].loadings.ncols();
    let chunks: Vec<ChunkResult> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(count - start);
            e_step_chunk(&x.columns(start, len).into_owned(), params, prepared, n, l)
        })
        .collect();

    let mut per_sample = Vec::with_capacity(count);
    let mut stats = vec![Stats::zeros(n, l); params.len()];
    for chunk in &chunks {
        per_sample.extend_from_slice(&chunk.log_lik);
        for (acc, s) in stats.iter_mut().zip(&chunk.stats) {
            acc.add(s);
        }
    }
    let mean = per_sample.iter().sum::<f64>() / count as f64;
    (mean, per_sample, stats)
}

fn e_step_chunk(
    x: &DMatrix<f64>,
    params: &[Params],
    prepared: &[Prepared],
    n: usize,
    l: usize,
) -> ChunkResult {
    let b = x.ncols();
    let k = params.len();
    let mut log_joint = DMatrix::<f64>::zeros(k, b);
    let mut factor_means = Vec::with_capacity(k);
    for (i, (p, prep)) in params.iter().zip(prepared).enumerate() {
        let mut resid = x.clone();
        for mut col in resid.column_iter_mut() {
            col -= &p.mean;
        }
        let mut weighted = resid.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&prep.inv_noise);
        }
        let proj = p.loadings.transpose() * &weighted;
        let ey = &prep.core_inv * &proj;
        for t in 0..b {
            let q = resid.column(t).dot(&weighted.column(t)) - proj.column(t).dot(&ey.column(t));
            log_joint[(i, t)] = prep.log_weight + prep.log_norm - 0.5 * q;
        }
        factor_means.push(ey);
    }

    let mut log_lik = Vec::with_capacity(b);
    let mut resp = DMatrix::<f64>::zeros(k, b);
    for t in 0..b {
        let col: Vec<f64> = log_joint.column(t).iter().copied().collect();
        let lse = crate::mfa::log_sum_exp(&col);
        log_lik.push(lse);
        for i in 0..k {
            resp[(i, t)] = (col[i] - lse).exp();
        }
    }

    let x_sq = x.map(|v| v * v);
    let stats = (0..k)
        .map(|i| {
            let h = resp.row(i).transpose();
            let mass = h.sum();
            let ey = &factor_means[i];
            let mut ey_h = ey.clone();
            for (t, mut col) in ey_h.column_iter_mut().enumerate() {
                col *= h[t];
            }
            let mut cross = DMatrix::zeros(n, l + 1);
            cross.columns_mut(0, l).copy_from(&(x * ey_h.transpose()));
            cross.column_mut(l).copy_from(&(x * &h));
            let mut second = DMatrix::zeros(l + 1, l + 1);
            let yy = &prepared[i].core_inv * mass + &ey_h * ey.transpose();
            second.view_mut((0, 0), (l, l)).copy_from(&yy);
            let y_sum = ey * &h;
            second.view_mut((0, l), (l, 1)).copy_from(&y_sum);
            second
                .view_mut((l, 0), (1, l))
                .copy_from(&y_sum.transpose());
            second[(l, l)] = mass;
            Stats {
                mass,
                cross,
                second,
                sq: &x_sq * &h,
            }
        })
        .collect();
    ChunkResult { log_lik, stats }
}

fn m_step(s: &Stats, count: usize, d_floor: f64) -> Params {
    let l = s.second.nrows() - 1;
    let mut second = s.second.clone();
    for i in 0..=l {
        for j in 0..i {
            let avg = 0.5 * (second[(i, j)] + second[(j, i)]);
            second[(i, j)] = avg;
            second[(j, i)] = avg;
        }
    }
    let augmented = match second.clone().cholesky() {
        Some(chol) => chol.solve(&s.cross.transpose()).transpose(),
        None => {
            let jitter = 1e-10 * second.diagonal().amax().max(1.0);
            for i in 0..=l {
                second[(i, i)] += jitter;
            }
            second
                .lu()
                .solve(&s.cross.transpose())
                .expect("jittered second moment is invertible")
                .transpose()
        }
    };
    let n = augmented.nrows();
    let noise = DVector::from_fn(n, |j, _| {
        let explained: f64 = (0..=l).map(|c| augmented[(j, c)] * s.cross[(j, c)]).sum();
        ((s.sq[j] - explained) / s.mass).max(d_floor)
    });
    Params {
        mean: augmented.column(l).into_owned(),
        loadings: augmented.columns(0, l).into_owned(),
        noise,
        weight: s.mass / count as f64,
    }
}
