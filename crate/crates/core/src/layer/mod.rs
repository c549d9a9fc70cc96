//! The first-layer convolution acting on a mixture of factor analyzers.
//!
//! For each component, the mean map is the ordinary convolution of the mean (plus bias) and the
//! variance map is the squared-weight convolution of the noise plus the squared convolutions of
//! every loading column. Output coordinates are then treated independently and the expected
//! ReLU of the resulting 1-D Gaussian mixture is evaluated in closed form.

mod conv;
mod io;
mod pushforward;
mod relu;

pub(crate) use conv::ConvPlan;
pub use conv::{classic_forward, classic_forward_batch, FeatureMap, InputShape, KernelStack};
pub use io::{read_kernels, read_kernels_from, write_kernels, write_kernels_to};
pub use pushforward::{
    conv_pushforward, conv_pushforward_with_stats, misconv_forward, misconv_forward_batch,
    ConvCount, GaussianFeatureMaps,
};
pub use relu::{expected_relu_scalar, rectified_gaussian_mean, std_normal_cdf, std_normal_pdf};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// No nonlinearity; the layer output is the expected linear response.
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" | "linear" => Ok(Activation::Linear),
            other => Err(Error::InvalidParameter(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Linear => "none",
        })
    }
}

/// Alternative readings of the layer formulas, kept to show that they disagree with the sampling
/// oracles. Not for production use.
#[doc(hidden)]
pub mod variants {
    pub use super::pushforward::{misconv_forward_variant, NoiseVariance};
    pub use super::relu::{expected_relu_with, RectifiedMean};
}
