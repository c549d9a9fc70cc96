//! Latency of the plain convolution against the missing-data layer.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layer::{
    classic_forward_batch, misconv_forward_batch, Activation, InputShape, KernelStack,
};
use crate::mfa::{condition, FactorAnalyzer, MaskedImage, MfaModel};
use crate::pipeline::mask::{apply_mask, MaskSpec};
use crate::rng::{derive_seed, seeded_rng};

pub const MIN_REPEATS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Square input sides.
    pub sizes: Vec<usize>,
    pub batches: Vec<usize>,
    pub l_values: Vec<usize>,
    pub k: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![28, 32, 64],
            batches: vec![16, 32, 64],
            l_values: vec![4],
            k: 1,
            repeats: MIN_REPEATS,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub input_size: usize,
    pub batch: usize,
    /// `classic` or `misconv_l{l}_k{k}`.
    pub layer: String,
    pub median_s: f64,
    pub iqr_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRatio {
    pub input_size: usize,
    pub batch: usize,
    pub layer: String,
    /// Median latency of `layer` over that of `classic`.
    pub ratio: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut times: Vec<f64>) -> (f64, f64) {
    times.sort_by(f64::total_cmp);
    (
        quantile(&times, 0.5),
        quantile(&times, 0.75) - quantile(&times, 0.25),
    )
}

fn random_prior(n: usize, l: usize, k: usize, seed: u64) -> Result<MfaModel> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let comps = (0..k)
        .map(|_| {
            FactorAnalyzer::new(
                DVector::from_fn(n, |_, _| rng.random::<f64>()),
                DMatrix::from_fn(n, l, |_, _| normal.sample(&mut rng)),
                DVector::from_fn(n, |_, _| rng.random_range(0.01..0.05)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MfaModel::new(comps, vec![1.0 / k as f64; k])
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(f()?);
    Ok(start.elapsed().as_secs_f64())
}

/// Median and interquartile latency per configuration, timed on the calling thread.
pub fn bench_layer(cfg: &BenchConfig) -> Result<Vec<TimingRow>> {
    if cfg.repeats < MIN_REPEATS {
        return Err(Error::InvalidParameter(format!(
            "repeats must be >= {MIN_REPEATS}, got {}",
            cfg.repeats
        )));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let kernels = KernelStack::default_random(1, derive_seed(cfg.seed, 0))?;
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let shape = InputShape::new(1, size, size);
        let priors = cfg
            .l_values
            .iter()
            .map(|&l| {
                random_prior(
                    shape.len(),
                    l,
                    cfg.k,
                    derive_seed(cfg.seed, (size * 100 + l) as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for &batch in &cfg.batches {
            let mut rng = seeded_rng(derive_seed(cfg.seed, (size * 1000 + batch) as u64));
            let spec = MaskSpec::square(0.25, 0);
            let images = (0..batch)
                .map(|_| {
                    let px = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
                    apply_mask(&MaskedImage::complete(px), &spec, shape, rng.random())
                })
                .collect::<Result<Vec<_>>>()?;
            let filled: Vec<&[f64]> = images.iter().map(|im| im.pixels()).collect();
            let conditioned = priors
                .iter()
                .map(|p| {
                    images
                        .iter()
                        .map(|im| condition(p, im))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<Vec<&MfaModel>> =
                conditioned.iter().map(|c| c.iter().collect()).collect();

            let mut classic = Vec::with_capacity(cfg.repeats);
            let mut misconv = vec![Vec::with_capacity(cfg.repeats); priors.len()];
            for it in 0..cfg.warmup + cfg.repeats {
                let t = time(|| classic_forward_batch(&filled, &kernels, shape, Activation::Relu))?;
                let ts = refs
                    .iter()
                    .map(|r| time(|| misconv_forward_batch(r, &kernels, shape, Activation::Relu)))
                    .collect::<Result<Vec<_>>>()?;
                if it >= cfg.warmup {
                    classic.push(t);
                    misconv.iter_mut().zip(ts).for_each(|(v, t)| v.push(t));
                }
            }
            let (median_s, iqr_s) = summarize(classic);
            rows.push(TimingRow {
                input_size: size,
                batch,
                layer: "classic".into(),
                median_s,
                iqr_s,
            });
            for (&l, times) in cfg.l_values.iter().zip(misconv) {
                let (median_s, iqr_s) = summarize(times);
                rows.push(TimingRow {
                    input_size: size,
                    batch,
                    layer: format!("misconv_l{l}_k{}", cfg.k),
                    median_s,
                    iqr_s,
                });
            }
            log::info!("timed {size}x{size} batch {batch}");
        }
    }
    Ok(rows)
}

pub fn latency_ratios(rows: &[TimingRow]) -> Vec<LatencyRatio> {
    rows.iter()
        .filter(|r| r.layer != "classic")
        .filter_map(|r| {
            rows.iter()
                .find(|c| {
                    c.layer == "classic" && c.input_size == r.input_size && c.batch == r.batch
                })
                .map(|c| LatencyRatio {
                    input_size: r.input_size,
                    batch: r.batch,
                    layer: r.layer.clone(),
                    ratio: r.median_s / c.median_s,
                })
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("input_size,batch,layer,median_s,iqr_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6e},{:.6e}",
            r.input_size, r.batch, r.layer, r.median_s, r.iqr_s
        );
    }
    out
}

pub fn write_timing_csv(rows: &[TimingRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, timing_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let (m, iqr) = summarize(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
    }

    #[test]
    fn small_grid_produces_rows() {
        let cfg = BenchConfig {
            sizes: vec![8],
            batches: vec![2, 4],
            l_values: vec![0, 2],
            repeats: 100,
            warmup: 1,
            ..Default::default()
        };
        let rows = bench_layer(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.median_s > 0.0 && r.iqr_s >= 0.0));
        assert_eq!(latency_ratios(&rows).len(), 4);
        let csv = timing_csv(&rows);
        assert!(csv.starts_with("input_size,batch,layer,median_s,iqr_s\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn too_few_repeats() {
        let cfg = BenchConfig {
            repeats: 10,
            ..Default::default()
        };
        assert!(bench_layer(&cfg).is_err());
    }
}
