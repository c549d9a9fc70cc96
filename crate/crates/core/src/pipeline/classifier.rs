//! Multinomial logistic regression on standardized features.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{check_dim, Error, Result};
use crate::pipeline::features::FeatureMatrix;
use crate::rng::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 64,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::InvalidParameter("l2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-feature affine map to zero mean and unit variance; constant features are only centered.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: DVector<f64>,
    inv_scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(features: &FeatureMatrix) -> Self {
        let x = features.by_sample();
        let n = x.ncols().max(1) as f64;
        let mean = x.column_sum() / n;
        let mut var = DVector::<f64>::zeros(x.nrows());
        for col in x.column_iter() {
            for ((v, &c), &m) in var.iter_mut().zip(col.iter()).zip(mean.iter()) {
                *v += (c - m) * (c - m);
            }
        }
        let inv_scale = var.map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        });
        Self { mean, inv_scale }
    }

    /// Standardized copies of the selected samples, one per column.
    pub fn transform(&self, features: &FeatureMatrix, idx: &[usize]) -> DMatrix<f64> {
        let d = features.dim();
        let mut out = DMatrix::zeros(d, idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let src = features.sample(i);
            let dst = &mut out.as_mut_slice()[b * d..(b + 1) * d];
            for j in 0..d {
                dst[j] = (src[j] - self.mean[j]) * self.inv_scale[j];
            }
        }
        out
    }
}

/// Mean cross-entropy plus `½·l2·‖W‖²` and its gradients. `x` holds one sample per column.
pub fn loss_and_gradient(
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    x: &DMatrix<f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let b = x.ncols();
    let mut probs = weights * x;
    let mut loss = 0.0;
    for (mut col, &y) in probs.column_iter_mut().zip(labels) {
        col += bias;
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
        loss -= col[y].max(f64::MIN_POSITIVE).ln();
        col[y] -= 1.0;
    }
    let scale = 1.0 / b.max(1) as f64;
    probs *= scale;
    let grad_w = &probs * x.transpose() + weights * l2;
    let grad_b = probs.column_sum();
    (
        loss * scale + 0.5 * l2 * weights.norm_squared(),
        grad_w,
        grad_b,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    standardizer: Standardizer,
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    /// Mean mini-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Accuracy on the evaluation set after each epoch, when one was given.
    pub eval_accuracy: Vec<f64>,
}

impl LinearClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Vec<usize> {
        let idx: Vec<usize> = (0..features.num_images()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let x = self.standardizer.transform(features, chunk);
            let mut scores = &self.weights * x;
            for mut col in scores.column_iter_mut() {
                col += &self.bias;
                out.push(col.argmax().0);
            }
        }
        out
    }

    pub fn accuracy(&self, features: &FeatureMatrix, labels: &[usize]) -> f64 {
        let pred = self.predict(features);
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Mini-batch gradient descent with seeded shuffling; standardization is fit on `features`.
pub fn train_linear_classifier(
    features: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierConfig,
    eval: Option<(&FeatureMatrix, &[usize])>,
) -> Result<(LinearClassifier, TrainingReport)> {
    cfg.validate()?;
    check_dim("label count", features.num_images(), labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} >= {num_classes} classes"
        )));
    }
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InsufficientData("need at least two classes".into()));
    }
    if features.by_sample().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "features contain non-finite values".into(),
        ));
    }

    let standardizer = Standardizer::fit(features);
    let mut model = LinearClassifier {
        standardizer,
        weights: DMatrix::zeros(num_classes, features.dim()),
        bias: DVector::zeros(num_classes),
    };
    let mut report = TrainingReport::default();
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let x = model.standardizer.transform(features, idx);
            batch_labels.clear();
            batch_labels.extend(idx.iter().map(|&i| labels[i]));
            let (loss, gw, gb) =
                loss_and_gradient(&model.weights, &model.bias, &x, &batch_labels, cfg.l2);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss {loss} in epoch {epoch} at learning rate {}",
                    cfg.learning_rate
                )));
            }
            model.weights -= gw * cfg.learning_rate;
            model.bias -= gb * cfg.learning_rate;
            total += loss;
            batches += 1;
        }
        report.epoch_loss.push(total / batches as f64);
        if let Some((xe, ye)) = eval {
            report.eval_accuracy.push(model.accuracy(xe, ye));
        }
        log::debug!("epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(
        n: usize,
        classes: usize,
        dim: usize,
        sep: f64,
        seed: u64,
    ) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = seeded_rng(seed);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| sep * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            labels.push(y);
            for c in &centers[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + z);
            }
        }
        (FeatureMatrix::from_samples(data, n, dim).unwrap(), labels)
    }

    #[test]
    fn separable_blobs() {
        let (xtr, ytr) = blobs(400, 2, 5, 8.0, 1);
        let (xte, yte) = blobs(200, 2, 5, 8.0, 1);
        let cfg = ClassifierConfig {
            learning_rate: 0.1,
            epochs: 10,
            ..Default::default()
        };
        let (clf, rep) = train_linear_classifier(&xtr, &ytr, 2, &cfg, Some((&xte, &yte))).unwrap();
        assert!(clf.accuracy(&xte, &yte) >= 0.99);
        assert_eq!(rep.eval_accuracy.len(), 10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let (c, d, b) = (4, 7, 9);
        let w = DMatrix::from_fn(c, d, |_, _| rng.random_range(-0.5..0.5));
        let bias = DVector::from_fn(c, |_, _| rng.random_range(-0.5..0.5));
        let x = DMatrix::from_fn(d, b, |_, _| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let l2 = 0.03;
        let (_, gw, gb) = loss_and_gradient(&w, &bias, &x, &labels, l2);
        let h = 1e-5;
        for t in 0..20 {
            let (fd, analytic) = if t % 4 == 3 {
                let r = rng.random_range(0..c);
                let (mut bp, mut bm) = (bias.clone(), bias.clone());
                bp[r] += h;
                bm[r] -= h;
                let fp = loss_and_gradient(&w, &bp, &x, &labels, l2).0;
                let fm = loss_and_gradient(&w, &bm, &x, &labels, l2).0;
                ((fp - fm) / (2.0 * h), gb[r])
            } else {
                let (r, s) = (rng.random_range(0..c), rng.random_range(0..d));
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[(r, s)] += h;
                wm[(r, s)] -= h;
                let fp = loss_and_gradient(&wp, &bias, &x, &labels, l2).0;
                let fm = loss_and_gradient(&wm, &bias, &x, &labels, l2).0;
                ((fp - fm) / (2.0 * h), gw[(r, s)])
            };
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
            assert!(rel < 1e-5, "coordinate {t}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let n = 4000;
        let (x, y) = blobs(n, 10, 8, 3.0, 5);
        let noise = crate::pipeline::features::shuffled_labels(&y, 11);
        let (xte, yte) = blobs(n, 10, 8, 3.0, 6);
        let yte_shuffled = crate::pipeline::features::shuffled_labels(&yte, 12);
        let cfg = ClassifierConfig {
            epochs: 5,
            ..Default::default()
        };
        let (clf, _) = train_linear_classifier(&x, &noise, 10, &cfg, None).unwrap();
        let acc = clf.accuracy(&xte, &yte_shuffled);
        let bound = 3.0 * (0.1f64 * 0.9 / n as f64).sqrt();
        assert!((acc - 0.1).abs() <= bound, "accuracy {acc}");
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = blobs(100, 3, 4, 1.0, 2);
        let cfg = ClassifierConfig {
            learning_rate: 1e300,
            ..Default::default()
        };
        match train_linear_classifier(&x, &y, 3, &cfg, None) {
            Err(e @ Error::Divergence(_)) => assert!(e.to_string().contains("lower learning rate")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let (x, y) = blobs(200, 3, 4, 2.0, 9);
        let cfg = ClassifierConfig::default();
        let a = train_linear_classifier(&x, &y, 3, &cfg, None).unwrap().0;
        let b = train_linear_classifier(&x, &y, 3, &cfg, None).unwrap().0;
        assert_eq!(a, b);
        assert!(train_linear_classifier(&x, &vec![0; 200], 3, &cfg, None).is_err());
        assert!(train_linear_classifier(&x, &y[1..], 3, &cfg, None).is_err());
    }
}
