//! First-layer features for each experimental arm.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::baselines::{ImputationMode, ImputationStrategy};
use crate::error::{check_dim, Error, Result};
use crate::layer::{
    classic_forward_batch, misconv_forward_batch, Activation, InputShape, KernelStack,
};
use crate::mfa::{condition, MaskedImage, MfaModel};
use crate::rng::seeded_rng;

/// Images handled per parallel task.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureArm {
    MisConv,
    Zero,
    Mask,
    MfaMean,
}

impl FeatureArm {
    pub const ALL: [FeatureArm; 4] = [
        FeatureArm::MisConv,
        FeatureArm::Zero,
        FeatureArm::Mask,
        FeatureArm::MfaMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureArm::MisConv => "misconv",
            FeatureArm::Zero => "zero",
            FeatureArm::Mask => "mask",
            FeatureArm::MfaMean => "mfa_mean",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, FeatureArm::MisConv | FeatureArm::MfaMean)
    }
}

impl fmt::Display for FeatureArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureArm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

/// Features of `num_images` samples, stored one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    /// `samples` holds `num_images` consecutive blocks of `dim` values.
    pub fn from_samples(samples: Vec<f64>, num_images: usize, dim: usize) -> Result<Self> {
        check_dim("feature buffer", num_images * dim, samples.len())?;
        Ok(Self {
            data: DMatrix::from_vec(dim, num_images, samples),
        })
    }

    pub fn num_images(&self) -> usize {
        self.data.ncols()
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `(num_images, dim)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.num_images(), self.dim())
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data.as_slice()[i * d..(i + 1) * d]
    }

    /// Column `i` is sample `i`.
    pub fn by_sample(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Kernels for the mask-channel arm: the first `C` channels copy `base`, the `C` indicator
/// channels get fresh He-scaled weights from `seed`.
pub fn mask_channel_kernels(base: &KernelStack, seed: u64) -> Result<KernelStack> {
    let (kh, kw) = base.kernel_size();
    let (f, c) = (base.filters(), base.channels());
    let extra = KernelStack::random(f, 2 * c, (kh, kw), base.stride(), base.padding(), seed)?;
    let block = c * kh * kw;
    let mut weights = Vec::with_capacity(2 * f * block);
    for filter in 0..f {
        weights.extend_from_slice(&base.weights()[filter * block..(filter + 1) * block]);
        let mask_part = &extra.weights()[filter * 2 * block + block..(filter + 1) * 2 * block];
        weights.extend_from_slice(mask_part);
    }
    KernelStack::new(
        f,
        2 * c,
        kh,
        kw,
        weights,
        base.bias().to_vec(),
        base.stride(),
        base.padding(),
    )
}

/// Inputs an arm needs besides the images.
#[derive(Debug, Clone, Copy)]
pub struct ArmInputs<'a> {
    pub kernels: &'a KernelStack,
    /// Only read by the mask arm; must have twice the image channels.
    pub mask_kernels: Option<&'a KernelStack>,
    pub model: Option<&'a MfaModel>,
    pub mode: ImputationMode,
}

fn chunk_features(
    arm: FeatureArm,
    images: &[MaskedImage],
    shape: InputShape,
    inputs: &ArmInputs<'_>,
) -> Result<Vec<Vec<f64>>> {
    let missing_model = || Error::InvalidParameter(format!("arm {arm} needs an MFA model"));
    let maps = match arm {
        FeatureArm::MisConv => {
            let model = inputs.model.ok_or_else(missing_model)?;
            let conditioned = images
                .iter()
                .map(|img| condition(model, img))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MfaModel> = conditioned.iter().collect();
            misconv_forward_batch(&refs, inputs.kernels, shape, Activation::Relu)?
        }
        FeatureArm::Zero | FeatureArm::Mask | FeatureArm::MfaMean => {
            let (strategy, kernels) = match arm {
                FeatureArm::Zero => (ImputationStrategy::Zero, inputs.kernels),
                FeatureArm::Mask => (
                    ImputationStrategy::MaskChannel,
                    inputs.mask_kernels.ok_or_else(|| {
                        Error::InvalidParameter("mask arm needs mask-channel kernels".into())
                    })?,
                ),
                _ => (
                    ImputationStrategy::MfaMean {
                        model: inputs.model.ok_or_else(missing_model)?,
                        mode: inputs.mode,
                    },
                    inputs.kernels,
                ),
            };
            let mut filled = Vec::with_capacity(images.len());
            let mut channels = shape.channels;
            for img in images {
                let (v, c) = strategy.impute(img, shape)?;
                channels = c;
                filled.push(v);
            }
            let refs: Vec<&[f64]> = filled.iter().map(|v| v.as_slice()).collect();
            let in_shape = InputShape::new(channels, shape.height, shape.width);
            classic_forward_batch(&refs, kernels, in_shape, Activation::Relu)?
        }
    };
    Ok(maps.into_iter().map(|m| m.data).collect())
}

/// Flattened ReLU feature maps of every image under `arm`.
pub fn extract_features(
    arm: FeatureArm,
    images: &[MaskedImage],
    shape: InputShape,
    inputs: &ArmInputs<'_>,
) -> Result<FeatureMatrix> {
    let dim = inputs.kernels.output_shape(shape)?.len();
    if let Some(model) = inputs.model {
        check_dim("model dimension", shape.len(), model.dim())?;
    }
    let mut buffer = vec![0.0; images.len() * dim];
    if dim > 0 {
        buffer
            .par_chunks_mut(CHUNK * dim)
            .zip(images.par_chunks(CHUNK))
            .try_for_each(|(dst, chunk)| -> Result<()> {
                for (row, feats) in dst
                    .chunks_mut(dim)
                    .zip(chunk_features(arm, chunk, shape, inputs)?)
                {
                    row.copy_from_slice(&feats);
                }
                Ok(())
            })?;
    }
    FeatureMatrix::from_samples(buffer, images.len(), dim)
}

const FEATURES_MAGIC: &[u8; 4] = b"FTR1";

/// Writes `FTR1`: magic, `u32` sample count, `u32` dimension, one `u8` label per sample, then
/// the features of each sample as little-endian `f64`.
pub fn write_features(
    path: impl AsRef<Path>,
    features: &FeatureMatrix,
    labels: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    check_dim("label count", features.num_images(), labels.len())?;
    let data = features.by_sample().as_slice();
    let mut bytes = Vec::with_capacity(12 + labels.len() + 8 * data.len());
    bytes.extend_from_slice(FEATURES_MAGIC);
    bytes.extend_from_slice(&(features.num_images() as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(labels);
    data.iter()
        .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(FeatureMatrix, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FEATURES_MAGIC {
        return Err(Error::format(path, "bad magic, expected FTR1"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + n + 8 * n * d {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let labels = bytes[12..12 + n].to_vec();
    let data = bytes[12 + n..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((FeatureMatrix::from_samples(data, n, d)?, labels))
}

/// Shuffled copy of `labels` for chance-level checks.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut out = labels.to_vec();
    out.shuffle(&mut seeded_rng(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfa::FactorAnalyzer;
    use nalgebra::{DMatrix as M, DVector};

    fn setup() -> (InputShape, KernelStack, MfaModel, Vec<MaskedImage>) {
        let shape = InputShape::new(1, 6, 6);
        let kernels = KernelStack::random(3, 1, (3, 3), (1, 1), (1, 1), 4).unwrap();
        let comps = (0..2)
            .map(|i| {
                FactorAnalyzer::new(
                    DVector::from_fn(36, |j, _| ((j + i) % 4) as f64 / 4.0),
                    M::from_fn(36, 2, |j, c| ((j * 3 + c + i) % 7) as f64 / 20.0 - 0.15),
                    DVector::from_element(36, 0.02),
                )
                .unwrap()
            })
            .collect();
        let model = MfaModel::new(comps, vec![0.4, 0.6]).unwrap();
        let images = (0..20)
            .map(|i| {
                let px: Vec<f64> = (0..36).map(|j| ((i * 5 + j) % 9) as f64 / 9.0).collect();
                let observed: Vec<bool> = (0..36).map(|j| (j + i) % 3 != 0).collect();
                MaskedImage::new(px, observed).unwrap()
            })
            .collect();
        (shape, kernels, model, images)
    }

    #[test]
    fn shapes_and_chunk_independence() {
        let (shape, kernels, model, images) = setup();
        let mask_k = mask_channel_kernels(&kernels, 9).unwrap();
        let inputs = ArmInputs {
            kernels: &kernels,
            mask_kernels: Some(&mask_k),
            model: Some(&model),
            mode: ImputationMode::MixtureMean,
        };
        for arm in FeatureArm::ALL {
            let all = extract_features(arm, &images, shape, &inputs).unwrap();
            assert_eq!(all.shape(), (20, 3 * 36));
            let one = extract_features(arm, &images[17..18], shape, &inputs).unwrap();
            assert_eq!(one.sample(0), all.sample(17), "{arm}");
        }
    }

    #[test]
    fn complete_images_make_arms_agree() {
        let (shape, kernels, model, images) = setup();
        let complete: Vec<MaskedImage> = images
            .iter()
            .map(|im| MaskedImage::complete(im.pixels().to_vec()))
            .collect();
        let inputs = ArmInputs {
            kernels: &kernels,
            mask_kernels: None,
            model: Some(&model),
            mode: ImputationMode::MixtureMean,
        };
        let zero = extract_features(FeatureArm::Zero, &complete, shape, &inputs).unwrap();
        for arm in [FeatureArm::MisConv, FeatureArm::MfaMean] {
            let other = extract_features(arm, &complete, shape, &inputs).unwrap();
            let diff = (zero.by_sample() - other.by_sample()).amax();
            assert!(diff <= 1e-12, "{arm}: {diff}");
        }
    }

    #[test]
    fn mask_kernels_keep_base_weights() {
        let base = KernelStack::random(2, 3, (3, 3), (1, 1), (1, 1), 1).unwrap();
        let mk = mask_channel_kernels(&base, 2).unwrap();
        assert_eq!(mk.channels(), 6);
        for f in 0..2 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        assert_eq!(mk.weight(f, c, i, j), base.weight(f, c, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ftr");
        let x = FeatureMatrix::from_samples(vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0], 3, 2).unwrap();
        write_features(&path, &x, &[1, 0, 9]).unwrap();
        let (y, labels) = read_features(&path).unwrap();
        assert_eq!(x, y);
        assert_eq!(labels, vec![1, 0, 9]);
        std::fs::write(&path, b"FTR1\x01\0\0\0").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn arm_names_roundtrip() {
        for arm in FeatureArm::ALL {
            assert_eq!(arm.name().parse::<FeatureArm>().unwrap(), arm);
        }
        assert!("knn".parse::<FeatureArm>().is_err());
    }

    #[test]
    fn missing_model_is_an_error() {
        let (shape, kernels, _, images) = setup();
        let inputs = ArmInputs {
            kernels: &kernels,
            mask_kernels: None,
            model: None,
            mode: ImputationMode::MixtureMean,
        };
        assert!(extract_features(FeatureArm::MisConv, &images, shape, &inputs).is_err());
        assert!(extract_features(FeatureArm::Mask, &images, shape, &inputs).is_err());
    }
}
