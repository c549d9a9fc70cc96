//! Independent reference implementations shared by the integration tests: dense Gaussian
//! algebra on the full covariance and a direct-loop convolution.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use misconv::layer::{InputShape, KernelStack};
use misconv::mfa::{FactorAnalyzer, MfaModel};
use misconv::rng::seeded_rng;

/// Log-density of `N(mean, cov)` at `x` from a dense Cholesky factorization.
pub fn dense_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = mean.len() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .expect("covariance must be positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = x - mean;
    let sol = chol.solve(&r);
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn dense_mixture_log_density(model: &MfaModel, x: &DVector<f64>) -> f64 {
    let terms: Vec<f64> = model
        .components()
        .iter()
        .zip(model.weights())
        .map(|(c, w)| w.ln() + dense_log_density(c.mean(), &c.covariance_dense(), x))
        .collect();
    log_sum_exp(&terms)
}

pub trait DenseCovariance {
    fn covariance_dense(&self) -> DMatrix<f64>;
}

impl DenseCovariance for FactorAnalyzer {
    fn covariance_dense(&self) -> DMatrix<f64> {
        let a = self.loadings();
        let mut s = a * a.transpose();
        for (i, d) in self.noise().iter().enumerate() {
            s[(i, i)] += d;
        }
        s
    }
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Gaussian conditioning by the Schur complement on the full covariance.
pub struct DenseConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_evidence: f64,
}

pub fn dense_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &[f64],
    observed: &[bool],
) -> DenseConditional {
    let o: Vec<usize> = (0..mean.len()).filter(|&i| observed[i]).collect();
    let m: Vec<usize> = (0..mean.len()).filter(|&i| !observed[i]).collect();
    let s_oo = submatrix(cov, &o, &o);
    let s_mo = submatrix(cov, &m, &o);
    let s_mm = submatrix(cov, &m, &m);
    let x_o = DVector::from_fn(o.len(), |i, _| x[o[i]]);
    let mu_o = subvector(mean, &o);
    let inv = s_oo
        .clone()
        .try_inverse()
        .expect("invertible observed block");
    let cond_mean = subvector(mean, &m) + &s_mo * &inv * (&x_o - &mu_o);
    let cond_cov = s_mm - &s_mo * &inv * s_mo.transpose();
    DenseConditional {
        mean: cond_mean,
        cov: cond_cov,
        log_evidence: dense_log_density(&mu_o, &s_oo, &x_o),
    }
}

pub fn random_fa<R: Rng>(rng: &mut R, n: usize, l: usize) -> FactorAnalyzer {
    let normal = Normal::new(0.0, 0.5).unwrap();
    FactorAnalyzer::new(
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(n, l, |_, _| normal.sample(rng)),
        DVector::from_fn(n, |_, _| rng.random_range(0.05..0.5)),
    )
    .unwrap()
}

pub fn random_model(seed: u64, n: usize, l: usize, k: usize) -> MfaModel {
    let mut rng = seeded_rng(seed);
    let comps = (0..k).map(|_| random_fa(&mut rng, n, l)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    MfaModel::new(comps, raw.iter().map(|w| w / total).collect()).unwrap()
}

pub fn random_kernels(
    seed: u64,
    filters: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> KernelStack {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let weights = (0..filters * channels * kernel * kernel)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let bias = (0..filters).map(|_| rng.random_range(-0.3..0.3)).collect();
    KernelStack::new(
        filters,
        channels,
        kernel,
        kernel,
        weights,
        bias,
        (stride, stride),
        (padding, padding),
    )
    .unwrap()
}

/// Cross-correlation with zero padding by explicit loops over filter, output row, output
/// column and the receptive field. Returns the pre-activation map laid out `F×H′×W′`.
pub fn naive_conv(img: &[f64], k: &KernelStack, input: InputShape) -> (InputShape, Vec<f64>) {
    let (kh, kw) = k.kernel_size();
    let (sh, sw) = k.stride();
    let (ph, pw) = k.padding();
    let oh = (input.height + 2 * ph - kh) / sh + 1;
    let ow = (input.width + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; k.filters() * oh * ow];
    for f in 0..k.filters() {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = k.bias()[f];
                for c in 0..input.channels {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * sh + i) as isize - ph as isize;
                            let ix = (x * sw + j) as isize - pw as isize;
                            if iy < 0
                                || ix < 0
                                || iy >= input.height as isize
                                || ix >= input.width as isize
                            {
                                continue;
                            }
                            let p = (c * input.height + iy as usize) * input.width + ix as usize;
                            acc += k.weight(f, c, i, j) * img[p];
                        }
                    }
                }
                out[(f * oh + y) * ow + x] = acc;
            }
        }
    }
    (InputShape::new(k.filters(), oh, ow), out)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Paths of a synthetic IDX train/test pair.
pub struct SyntheticIdx {
    pub train_images: std::path::PathBuf,
    pub train_labels: std::path::PathBuf,
    pub test_images: std::path::PathBuf,
    pub test_labels: std::path::PathBuf,
}

/// Ten-class `side × side` images: each class lights a fixed set of 3×3 blobs, plus noise.
pub fn write_synthetic_idx(
    dir: &std::path::Path,
    train: usize,
    test: usize,
    side: usize,
) -> SyntheticIdx {
    let mut rng = seeded_rng(0xD161);
    let templates: Vec<Vec<(usize, usize)>> = (0..10)
        .map(|_| {
            (0..3)
                .map(|_| (rng.random_range(0..side - 2), rng.random_range(0..side - 2)))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 40.0).unwrap();
    let mut make = |n: usize| {
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i * 7 + rng.random_range(0..10)) % 10;
            let mut img = vec![0.0f64; side * side];
            for &(y, x) in &templates[class] {
                for dy in 0..3 {
                    for dx in 0..3 {
                        img[(y + dy) * side + x + dx] = 220.0;
                    }
                }
            }
            images.push(
                img.iter()
                    .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 255.0) as u8)
                    .collect::<Vec<u8>>(),
            );
            labels.push(class as u8);
        }
        (images, labels)
    };
    let paths = SyntheticIdx {
        train_images: dir.join("train-images-idx3-ubyte"),
        train_labels: dir.join("train-labels-idx1-ubyte"),
        test_images: dir.join("t10k-images-idx3-ubyte"),
        test_labels: dir.join("t10k-labels-idx1-ubyte"),
    };
    let (im, lb) = make(train);
    misconv::pipeline::write_idx(
        &paths.train_images,
        &paths.train_labels,
        &im,
        &lb,
        side,
        side,
    )
    .unwrap();
    let (im, lb) = make(test);
    misconv::pipeline::write_idx(&paths.test_images, &paths.test_labels, &im, &lb, side, side)
        .unwrap();
    paths
}

/// Small, fast experiment over a synthetic IDX pair.
pub fn synthetic_config(
    data: &SyntheticIdx,
    out: &std::path::Path,
) -> misconv::pipeline::ExperimentConfig {
    let mut cfg = misconv::pipeline::ExperimentConfig {
        train_images: data.train_images.clone(),
        train_labels: data.train_labels.clone(),
        test_images: data.test_images.clone(),
        test_labels: data.test_labels.clone(),
        train_size: 300,
        test_size: 100,
        filters: 4,
        kernel_size: 3,
        output_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.em.k = 2;
    cfg.em.l = 2;
    cfg.em.max_iters = 15;
    cfg.classifier.epochs = 5;
    cfg
}
