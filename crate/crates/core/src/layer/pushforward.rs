use super::conv::{ConvPlan, FeatureMap, InputShape, KernelStack};
use super::relu::RectifiedMean;
use super::Activation;
use crate::error::{check_dim, Result};
use crate::mfa::MfaModel;

/// Per-coordinate distribution of a convolution applied to a mixture of factor analyzers:
/// component `i` contributes `N(means[i][j], variances[i][j])` at output coordinate `j`
/// with weight `weights[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFeatureMaps {
    pub weights: Vec<f64>,
    pub means: Vec<FeatureMap>,
    pub variances: Vec<FeatureMap>,
}

impl GaussianFeatureMaps {
    pub fn shape(&self) -> InputShape {
        self.means[0].shape
    }

    /// Expected activation on every output coordinate.
    pub fn expectation(&self, activation: Activation) -> FeatureMap {
        self.expectation_with(activation, RectifiedMean::Exact)
    }

    fn expectation_with(&self, activation: Activation, form: RectifiedMean) -> FeatureMap {
        let len = self.shape().len();
        let mut data = vec![0.0; len];
        for ((&p, mean), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            if p == 0.0 {
                continue;
            }
            match activation {
                Activation::Linear => {
                    for (o, &m) in data.iter_mut().zip(&mean.data) {
                        *o += p * m;
                    }
                }
                Activation::Relu => {
                    for ((o, &m), &v) in data.iter_mut().zip(&mean.data).zip(&var.data) {
                        *o += p * form.eval(m, v.sqrt());
                    }
                }
            }
        }
        FeatureMap {
            shape: self.shape(),
            data,
        }
    }
}

/// Number of input vectors sent through the convolution by one push-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCount {
    /// With the layer weights: the mean and every loading column of every component.
    pub standard: usize,
    /// With squared weights: the noise variances of every component.
    pub squared: usize,
}

/// How the diagonal noise enters the output variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseVariance {
    /// Diagonal of `M·diag(d)·Mᵀ`: convolution of `d` with squared weights.
    SquaredWeights,
    /// Convolution of `d` with the raw weights, clamped at zero.
    RawWeights,
}

/// Mean and variance maps of every component after the convolution.
pub fn conv_pushforward(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
) -> Result<GaussianFeatureMaps> {
    Ok(conv_pushforward_with_stats(model, kernels, input)?.0)
}

pub fn conv_pushforward_with_stats(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
) -> Result<(GaussianFeatureMaps, ConvCount)> {
    let (mut maps, count) =
        pushforward_batch(&[model], kernels, input, NoiseVariance::SquaredWeights)?;
    Ok((maps.remove(0), count))
}

/// Pixels where some component has nonzero noise or a nonzero loading row.
fn random_support(model: &MfaModel) -> Vec<bool> {
    let mut support = vec![false; model.dim()];
    for c in model.components() {
        let a = c.loadings();
        for (j, s) in support.iter_mut().enumerate() {
            if !*s {
                *s = c.noise()[j] != 0.0 || a.row(j).iter().any(|&v| v != 0.0);
            }
        }
    }
    support
}

fn pushforward_batch(
    models: &[&MfaModel],
    kernels: &KernelStack,
    input: InputShape,
    noise_path: NoiseVariance,
) -> Result<(Vec<GaussianFeatureMaps>, ConvCount)> {
    let plan = ConvPlan::new(kernels, input)?;
    for m in models {
        check_dim("model dimension", input.len(), m.dim())?;
    }
    let n = input.len();
    // Loadings and noise vanish on observed (point-mass) pixels, so their convolutions are
    // exactly zero outside the positions that read a random pixel.
    let active: Vec<Vec<usize>> = models
        .iter()
        .map(|m| plan.active_positions(&random_support(m)))
        .collect();

    let mut mean_inputs: Vec<&[f64]> = Vec::new();
    let mut loading_jobs: Vec<(&[f64], &[usize])> = Vec::new();
    let mut noise_jobs: Vec<(&[f64], &[usize])> = Vec::new();
    for (model, act) in models.iter().zip(&active) {
        for c in model.components() {
            mean_inputs.push(c.mean().as_slice());
            let loadings = c.loadings().as_slice();
            loading_jobs
                .extend((0..c.rank()).map(|j| (&loadings[j * n..(j + 1) * n], act.as_slice())));
            noise_jobs.push((c.noise().as_slice(), act.as_slice()));
        }
    }
    let count = ConvCount {
        standard: mean_inputs.len() + loading_jobs.len(),
        squared: noise_jobs.len(),
    };

    let weights = kernels.weight_matrix();
    let noise_weights = match noise_path {
        NoiseVariance::SquaredWeights => kernels.squared().weight_matrix(),
        NoiseVariance::RawWeights => weights.clone(),
    };
    let mean_out = plan.apply(&weights, &mean_inputs);
    let loading_out = plan.apply_at(&weights, &loading_jobs);
    let noise_out = plan.apply_at(&noise_weights, &noise_jobs);

    let filters = kernels.filters();
    let out_len = plan.output.len();
    let positions = plan.positions();
    let (loading_raw, noise_raw) = (loading_out.as_slice(), noise_out.as_slice());
    let mut mean_idx = 0;
    let (mut loading_col, mut noise_col) = (0, 0);
    let mut result = Vec::with_capacity(models.len());
    for (model, act) in models.iter().zip(&active) {
        let mut means = Vec::with_capacity(model.num_components());
        let mut variances = Vec::with_capacity(model.num_components());
        for c in model.components() {
            let mut mean = vec![0.0; out_len];
            plan.extract(&mean_out, mean_idx, &mut mean);
            for (f, chunk) in mean.chunks_mut(positions).enumerate() {
                let b = kernels.bias()[f];
                chunk.iter_mut().for_each(|v| *v += b);
            }
            mean_idx += 1;

            let mut var = vec![0.0; out_len];
            for (t, &q) in act.iter().enumerate() {
                let col = &noise_raw[(noise_col + t) * filters..(noise_col + t + 1) * filters];
                for (f, &v) in col.iter().enumerate() {
                    var[f * positions + q] = v;
                }
            }
            noise_col += act.len();
            for _ in 0..c.rank() {
                for (t, &q) in act.iter().enumerate() {
                    let col =
                        &loading_raw[(loading_col + t) * filters..(loading_col + t + 1) * filters];
                    for (f, &v) in col.iter().enumerate() {
                        var[f * positions + q] += v * v;
                    }
                }
                loading_col += act.len();
            }
            if noise_path == NoiseVariance::RawWeights {
                var.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            means.push(FeatureMap {
                shape: plan.output,
                data: mean,
            });
            variances.push(FeatureMap {
                shape: plan.output,
                data: var,
            });
        }
        result.push(GaussianFeatureMaps {
            weights: model.weights().to_vec(),
            means,
            variances,
        });
    }
    Ok((result, count))
}

/// Expected layer output `E[f(M·Z + b)]` under the per-coordinate marginals of `M·Z`.
pub fn misconv_forward(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
) -> Result<FeatureMap> {
    Ok(conv_pushforward(model, kernels, input)?.expectation(activation))
}

/// [`misconv_forward`] for many models, sharing one matrix product.
pub fn misconv_forward_batch(
    models: &[&MfaModel],
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
) -> Result<Vec<FeatureMap>> {
    let (maps, _) = pushforward_batch(models, kernels, input, NoiseVariance::SquaredWeights)?;
    Ok(maps.iter().map(|m| m.expectation(activation)).collect())
}

pub fn misconv_forward_variant(
    model: &MfaModel,
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
    noise_path: NoiseVariance,
    form: RectifiedMean,
) -> Result<FeatureMap> {
    let (maps, _) = pushforward_batch(&[model], kernels, input, noise_path)?;
    Ok(maps[0].expectation_with(activation, form))
}
