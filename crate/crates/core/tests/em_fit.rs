mod common;

use std::time::Instant;

use common::*;
use proptest::prelude::*;

use misconv::em::{fit, EmConfig, EmInit};
use misconv::mfa::MfaModel;
use misconv::rng::seeded_rng;

const MONOTONE_TOL: f64 = 1e-7;

fn draw(model: &MfaModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| model.sample_with(&mut rng).as_slice().to_vec())
        .collect()
}

#[test]
fn recovers_a_known_factor_analyzer() {
    let truth = random_model(5, 16, 2, 1);
    let data = draw(&truth, 5000, 6);
    let cfg = EmConfig {
        k: 1,
        l: 2,
        max_iters: 500,
        ll_tol: 1e-9,
        seed: 1,
        ..EmConfig::default()
    };
    let start = Instant::now();
    let (model, report) = fit(&data, &cfg).unwrap();
    assert!(start.elapsed().as_secs() < 120);
    assert!(report.worst_decrease() <= MONOTONE_TOL);

    let fitted = &model.components()[0];
    let want = &truth.components()[0];
    let err = frobenius_rel(&fitted.covariance_dense(), &want.covariance_dense());
    assert!(err < 0.10, "relative Frobenius error {err}");
    assert!((fitted.mean() - want.mean()).amax() < 0.05);
}

#[test]
fn diagonal_gaussian_is_the_sample_moments() {
    let truth = random_model(8, 7, 0, 1);
    let data = draw(&truth, 3000, 9);
    let cfg = EmConfig {
        k: 1,
        l: 0,
        d_floor: 0.1,
        ..EmConfig::default()
    };
    let (model, _) = fit(&data, &cfg).unwrap();
    let c = &model.components()[0];
    let n = data.len() as f64;
    for j in 0..7 {
        let mean = data.iter().map(|s| s[j]).sum::<f64>() / n;
        let var = data.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n;
        assert!((c.mean()[j] - mean).abs() < 1e-9);
        assert!((c.noise()[j] - var.max(cfg.d_floor)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn likelihood_never_decreases(
        seed in any::<u64>(),
        k in 1usize..=3,
        l in 0usize..=3,
        random_init in any::<bool>(),
    ) {
        let truth = random_model(seed, 10, 2, 2);
        let data = draw(&truth, 400, seed ^ 0x5a);
        let cfg = EmConfig {
            k,
            l,
            max_iters: 30,
            seed,
            init: if random_init { EmInit::RandomSubset } else { EmInit::KMeans },
            ..EmConfig::default()
        };
        let (m1, r1) = fit(&data, &cfg).unwrap();
        prop_assert!(r1.worst_decrease() <= MONOTONE_TOL, "{:?}", r1.log_likelihood);
        let (m2, r2) = fit(&data, &cfg).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(r1, r2);
    }
}
