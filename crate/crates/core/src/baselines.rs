//! Imputation strategies whose output is fed to the plain convolution.

use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::layer::InputShape;
use crate::mfa::{condition, conditional_mean_imputation, MaskedImage, MfaModel};

/// How a mixture fills the missing pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImputationMode {
    /// Responsibility-weighted mean over all conditioned components.
    #[default]
    MixtureMean,
    /// Conditional mean of the component with the largest posterior weight (lowest index on ties).
    MapComponent,
}

impl FromStr for ImputationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture-mean" => Ok(ImputationMode::MixtureMean),
            "map-component" => Ok(ImputationMode::MapComponent),
            other => Err(Error::Config(format!("unknown imputation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ImputationStrategy<'a> {
    /// Missing pixels become 0.
    Zero,
    /// Zero imputation followed by `C` indicator channels (1 observed, 0 missing).
    MaskChannel,
    /// Conditional mean under a mixture of factor analyzers.
    MfaMean {
        model: &'a MfaModel,
        mode: ImputationMode,
    },
}

impl ImputationStrategy<'_> {
    /// Returns the imputed vector and its channel count.
    pub fn impute(&self, img: &MaskedImage, shape: InputShape) -> Result<(Vec<f64>, usize)> {
        check_dim("image length", shape.len(), img.len())?;
        match *self {
            ImputationStrategy::Zero => Ok((img.pixels().to_vec(), shape.channels)),
            ImputationStrategy::MaskChannel => {
                let mut out = Vec::with_capacity(2 * img.len());
                out.extend_from_slice(img.pixels());
                out.extend(img.observed().iter().map(|&o| if o { 1.0 } else { 0.0 }));
                Ok((out, 2 * shape.channels))
            }
            ImputationStrategy::MfaMean { model, mode } => {
                check_dim("model dimension", img.len(), model.dim())?;
                let filled = match mode {
                    ImputationMode::MixtureMean => conditional_mean_imputation(model, img)?,
                    ImputationMode::MapComponent => map_component_imputation(model, img)?,
                };
                Ok((filled.as_slice().to_vec(), shape.channels))
            }
        }
    }
}

pub fn impute(
    strategy: &ImputationStrategy<'_>,
    img: &MaskedImage,
    shape: InputShape,
) -> Result<(Vec<f64>, usize)> {
    strategy.impute(img, shape)
}

fn map_component_imputation(model: &MfaModel, img: &MaskedImage) -> Result<DVector<f64>> {
    let conditioned = condition(model, img)?;
    let mut best = 0;
    for (i, &w) in conditioned.weights().iter().enumerate() {
        if w > conditioned.weights()[best] {
            best = i;
        }
    }
    Ok(conditioned.components()[best].mean().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfa::FactorAnalyzer;

    fn model() -> MfaModel {
        let a = FactorAnalyzer::diagonal(
            DVector::from_vec(vec![0.2, 0.4, 0.6, 0.8]),
            DVector::from_element(4, 0.1),
        )
        .unwrap();
        let b = FactorAnalyzer::diagonal(
            DVector::from_vec(vec![0.9, 0.1, 0.9, 0.1]),
            DVector::from_element(4, 0.1),
        )
        .unwrap();
        MfaModel::new(vec![a, b], vec![0.5, 0.5]).unwrap()
    }

    const SHAPE: InputShape = InputShape {
        channels: 1,
        height: 2,
        width: 2,
    };

    #[test]
    fn complete_images_pass_through() {
        let m = model();
        let img = MaskedImage::complete(vec![0.3, 0.1, 0.7, 0.5]);
        let strategies = [
            ImputationStrategy::Zero,
            ImputationStrategy::MfaMean {
                model: &m,
                mode: ImputationMode::MixtureMean,
            },
            ImputationStrategy::MfaMean {
                model: &m,
                mode: ImputationMode::MapComponent,
            },
        ];
        for s in &strategies {
            let (out, c) = s.impute(&img, SHAPE).unwrap();
            assert_eq!(out, img.pixels());
            assert_eq!(c, 1);
        }
        let (out, c) = ImputationStrategy::MaskChannel.impute(&img, SHAPE).unwrap();
        assert_eq!(c, 2);
        assert_eq!(&out[..4], img.pixels());
        assert_eq!(&out[4..], &[1.0; 4]);
    }

    #[test]
    fn zero_and_mask_channels() {
        let img =
            MaskedImage::new(vec![0.0, 0.0, 0.7, 0.0], vec![false, false, true, false]).unwrap();
        let (out, _) = ImputationStrategy::Zero.impute(&img, SHAPE).unwrap();
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
        let (out, _) = ImputationStrategy::MaskChannel.impute(&img, SHAPE).unwrap();
        assert_eq!(&out[4..], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mfa_modes_keep_observed_pixels() {
        let m = model();
        let img =
            MaskedImage::new(vec![0.85, 0.0, 0.95, 0.0], vec![true, false, true, false]).unwrap();
        for mode in [ImputationMode::MixtureMean, ImputationMode::MapComponent] {
            let (out, _) = ImputationStrategy::MfaMean { model: &m, mode }
                .impute(&img, SHAPE)
                .unwrap();
            assert_eq!(out[0], 0.85);
            assert_eq!(out[2], 0.95);
        }
        let (map, _) = ImputationStrategy::MfaMean {
            model: &m,
            mode: ImputationMode::MapComponent,
        }
        .impute(&img, SHAPE)
        .unwrap();
        assert_eq!(map[1], 0.1);
        assert_eq!(map[3], 0.1);
    }

    #[test]
    fn dimension_mismatch() {
        let m = model();
        let img = MaskedImage::complete(vec![0.0; 9]);
        let s = ImputationStrategy::MfaMean {
            model: &m,
            mode: ImputationMode::MixtureMean,
        };
        assert!(s.impute(&img, InputShape::new(1, 3, 3)).is_err());
    }
}
