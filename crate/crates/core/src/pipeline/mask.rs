//! Simulated missingness.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::layer::InputShape;
use crate::mfa::MaskedImage;
use crate::rng::{derive_seed, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPattern {
    /// Nothing is hidden.
    Complete,
    /// One axis-aligned square of side `round(√(area_fraction·H·W))` at a uniform position.
    Square { area_fraction: f64 },
    /// Every pixel location independently, all channels together.
    Noise { missing_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub seed: u64,
}

impl MaskSpec {
    pub fn square(area_fraction: f64, seed: u64) -> Self {
        Self {
            pattern: MaskPattern::Square { area_fraction },
            seed,
        }
    }

    pub fn noise(missing_fraction: f64, seed: u64) -> Self {
        Self {
            pattern: MaskPattern::Noise { missing_fraction },
            seed,
        }
    }

    pub fn complete() -> Self {
        Self {
            pattern: MaskPattern::Complete,
            seed: 0,
        }
    }

    /// Seed for example `index` of split `stream`.
    pub fn example_seed(&self, stream: u64, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, stream), index as u64)
    }

    pub fn square_side(area_fraction: f64, shape: InputShape) -> usize {
        (area_fraction * (shape.height * shape.width) as f64)
            .sqrt()
            .round() as usize
    }

    pub fn validate(&self, shape: InputShape) -> Result<()> {
        let in_unit = |f: f64| f > 0.0 && f < 1.0;
        match self.pattern {
            MaskPattern::Complete => Ok(()),
            MaskPattern::Square { area_fraction } => {
                if !in_unit(area_fraction) {
                    return Err(Error::InvalidParameter(format!(
                        "square area fraction {area_fraction} not in (0, 1)"
                    )));
                }
                let side = Self::square_side(area_fraction, shape);
                if side == 0 || side > shape.height || side > shape.width {
                    return Err(Error::InvalidParameter(format!(
                        "square of side {side} does not fit a {}×{} image",
                        shape.height, shape.width
                    )));
                }
                Ok(())
            }
            MaskPattern::Noise { missing_fraction } => {
                if in_unit(missing_fraction) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "missing fraction {missing_fraction} not in (0, 1)"
                    )))
                }
            }
        }
    }
}

/// Hides pixels of `img` according to `spec`, deterministically in `per_example_seed`.
pub fn apply_mask(
    img: &MaskedImage,
    spec: &MaskSpec,
    shape: InputShape,
    per_example_seed: u64,
) -> Result<MaskedImage> {
    check_dim("image length", shape.len(), img.len())?;
    spec.validate(shape)?;
    let plane = shape.pixels_per_channel();
    let mut hidden_px = vec![false; plane];
    let mut rng = seeded_rng(per_example_seed);
    match spec.pattern {
        MaskPattern::Complete => {}
        MaskPattern::Square { area_fraction } => {
            let side = MaskSpec::square_side(area_fraction, shape);
            let top = rng.random_range(0..=shape.height - side);
            let left = rng.random_range(0..=shape.width - side);
            for y in top..top + side {
                for x in left..left + side {
                    hidden_px[y * shape.width + x] = true;
                }
            }
        }
        MaskPattern::Noise { missing_fraction } => {
            for h in hidden_px.iter_mut() {
                *h = rng.random::<f64>() < missing_fraction;
            }
        }
    }
    let missing: Vec<bool> = (0..shape.len()).map(|j| hidden_px[j % plane]).collect();
    img.with_missing(&missing)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: InputShape = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };

    #[test]
    fn quarter_square_on_mnist() {
        let img = MaskedImage::complete(vec![0.5; 784]);
        let spec = MaskSpec::square(0.25, 3);
        assert_eq!(MaskSpec::square_side(0.25, MNIST), 14);
        for i in 0..50 {
            let masked = apply_mask(&img, &spec, MNIST, spec.example_seed(0, i)).unwrap();
            assert_eq!(masked.num_missing(), 196);
            let rows: Vec<usize> = (0..784)
                .filter(|&j| !masked.observed()[j])
                .map(|j| j / 28)
                .collect();
            assert_eq!(rows.last().unwrap() - rows[0], 13);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let img = MaskedImage::complete(vec![0.5; 784]);
        let spec = MaskSpec::noise(0.75, 1);
        let a = apply_mask(&img, &spec, MNIST, 99).unwrap();
        let b = apply_mask(&img, &spec, MNIST, 99).unwrap();
        let c = apply_mask(&img, &spec, MNIST, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn channels_are_masked_together() {
        let shape = InputShape::new(3, 4, 4);
        let img = MaskedImage::complete(vec![1.0; 48]);
        let masked = apply_mask(&img, &MaskSpec::noise(0.5, 0), shape, 5).unwrap();
        for j in 0..16 {
            let o = masked.observed();
            assert_eq!(o[j], o[16 + j]);
            assert_eq!(o[j], o[32 + j]);
        }
    }

    #[test]
    fn invalid_specs() {
        let img = MaskedImage::complete(vec![0.0; 784]);
        assert!(apply_mask(&img, &MaskSpec::square(1.0, 0), MNIST, 0).is_err());
        assert!(apply_mask(&img, &MaskSpec::noise(0.0, 0), MNIST, 0).is_err());
        let tall = InputShape::new(1, 28, 2);
        let img = MaskedImage::complete(vec![0.0; 56]);
        assert!(apply_mask(&img, &MaskSpec::square(0.5, 0), tall, 0).is_err());
        let full = apply_mask(&img, &MaskSpec::complete(), tall, 0).unwrap();
        assert_eq!(full.num_missing(), 0);
    }
}
