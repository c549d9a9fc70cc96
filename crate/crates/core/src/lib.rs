//! Convolutions of images with missing pixels.
//!
//! Missing pixels are described by a mixture of factor analyzers conditioned on the observed
//! ones ([`mfa`]). That mixture is pushed exactly through a convolution layer and the expected
//! ReLU activation is evaluated in closed form ([`layer`]). Monte-Carlo and quadrature oracles
//! ([`oracle`]) check those formulas independently. [`em`] estimates the mixture from data,
//! [`baselines`] provides the imputation arms it is compared against, [`verify`] bundles the
//! randomized oracle checks and [`pipeline`] runs the desk-scale experiments.

pub mod baselines;
pub mod em;
pub mod error;
pub mod layer;
pub mod mfa;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use layer::{
    classic_forward, conv_pushforward, expected_relu_scalar, misconv_forward, Activation,
    FeatureMap, GaussianFeatureMaps, InputShape, KernelStack,
};
pub use mfa::{condition, conditional_mean_imputation, FactorAnalyzer, MaskedImage, MfaModel};
