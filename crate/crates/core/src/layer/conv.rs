use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use super::Activation;
use crate::error::{check_dim, Error, Result};
use crate::rng::seeded_rng;

/// Geometry of a channel-major (`C × H × W`) image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_per_channel(&self) -> usize {
        self.height * self.width
    }
}

/// Convolution filters with zero padding (cross-correlation, no kernel flip).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    filters: usize,
    channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    /// `F × C × kh × kw`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    stride: (usize, usize),
    padding: (usize, usize),
}

impl KernelStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        filters: usize,
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if filters == 0 || channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidParameter(
                "kernel stack dimensions must be >= 1".into(),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        check_dim(
            "kernel weight count",
            filters * channels * kernel_h * kernel_w,
            weights.len(),
        )?;
        check_dim("bias length", filters, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite kernel weight".into()));
        }
        Ok(Self {
            filters,
            channels,
            kernel_h,
            kernel_w,
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// He-style random filters: weights `N(0, 2/(C·kh·kw))`, zero bias.
    pub fn random(
        filters: usize,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (channels * kernel.0 * kernel.1).max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let mut rng = seeded_rng(seed);
        let weights = (0..filters * channels * kernel.0 * kernel.1)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::new(
            filters,
            channels,
            kernel.0,
            kernel.1,
            weights,
            vec![0.0; filters],
            stride,
            padding,
        )
    }

    /// 32 filters of 5×5, stride 2, padding 2.
    pub fn default_random(channels: usize, seed: u64) -> Result<Self> {
        Self::random(32, channels, (5, 5), (2, 2), (2, 2), seed)
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn padding(&self) -> (usize, usize) {
        self.padding
    }

    /// Weight `w[f, c, i, j]`.
    pub fn weight(&self, f: usize, c: usize, i: usize, j: usize) -> f64 {
        self.weights[((f * self.channels + c) * self.kernel_h + i) * self.kernel_w + j]
    }

    /// Output geometry `(F, H′, W′)` for a given input.
    pub fn output_shape(&self, input: InputShape) -> Result<InputShape> {
        check_dim("input channels", self.channels, input.channels)?;
        let out = |size: usize, pad: usize, k: usize, s: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if padded < k {
                return Err(Error::InvalidParameter(format!(
                    "kernel of size {k} does not fit input of size {size} with padding {pad}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok(InputShape {
            channels: self.filters,
            height: out(input.height, self.padding.0, self.kernel_h, self.stride.0)?,
            width: out(input.width, self.padding.1, self.kernel_w, self.stride.1)?,
        })
    }

    /// Same geometry with elementwise squared weights and zero bias.
    pub fn squared(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * w).collect(),
            bias: vec![0.0; self.filters],
            ..self.clone()
        }
    }

    /// `F × (C·kh·kw)` weight matrix.
    pub(crate) fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            self.filters,
            self.channels * self.kernel_h * self.kernel_w,
            &self.weights,
        )
    }
}

/// Output of a convolution layer, `F × H′ × W′` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: InputShape,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, f: usize, y: usize, x: usize) -> f64 {
        self.data[(f * self.shape.height + y) * self.shape.width + x]
    }
}

const PADDED: u32 = u32::MAX;

/// Precomputed im2col gather table for one kernel geometry and input shape.
pub(crate) struct ConvPlan {
    pub input: InputShape,
    pub output: InputShape,
    patch_len: usize,
    positions: usize,
    /// `positions × patch_len`, position-major.
    gather: Vec<u32>,
}

impl ConvPlan {
    pub fn new(kernels: &KernelStack, input: InputShape) -> Result<Self> {
        let output = kernels.output_shape(input)?;
        let (kh, kw) = kernels.kernel_size();
        let (sh, sw) = kernels.stride();
        let (ph, pw) = kernels.padding();
        let patch_len = input.channels * kh * kw;
        let positions = output.height * output.width;
        let mut gather = Vec::with_capacity(positions * patch_len);
        for oy in 0..output.height {
            for ox in 0..output.width {
                for c in 0..input.channels {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * sh + i) as isize - ph as isize;
                            let x = (ox * sw + j) as isize - pw as isize;
                            let inside = y >= 0
                                && x >= 0
                                && (y as usize) < input.height
                                && (x as usize) < input.width;
                            gather.push(if inside {
                                ((c * input.height + y as usize) * input.width + x as usize) as u32
                            } else {
                                PADDED
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            input,
            output,
            patch_len,
            positions,
            gather,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    fn im2col(&self, vectors: &[&[f64]]) -> DMatrix<f64> {
        let mut cols = DMatrix::<f64>::zeros(self.patch_len, vectors.len() * self.positions);
        let data = cols.as_mut_slice();
        for (b, v) in vectors.iter().enumerate() {
            let base = b * self.positions * self.patch_len;
            for (dst, &idx) in data[base..base + self.positions * self.patch_len]
                .iter_mut()
                .zip(&self.gather)
            {
                if idx != PADDED {
                    *dst = v[idx as usize];
                }
            }
        }
        cols
    }

    /// Linear part of the convolution (no bias) for a batch of input vectors.
    /// Column `b·P + p` of the result holds output position `p` of vector `b`.
    pub fn apply(&self, weights: &DMatrix<f64>, vectors: &[&[f64]]) -> DMatrix<f64> {
        debug_assert!(vectors.iter().all(|v| v.len() == self.input.len()));
        weights * self.im2col(vectors)
    }

    /// Output positions whose receptive field reads at least one index flagged in `support`.
    pub fn active_positions(&self, support: &[bool]) -> Vec<usize> {
        self.gather
            .chunks_exact(self.patch_len)
            .enumerate()
            .filter(|(_, patch)| patch.iter().any(|&i| i != PADDED && support[i as usize]))
            .map(|(q, _)| q)
            .collect()
    }

    /// Like [`apply`](Self::apply), evaluating vector `b` only at the positions `jobs[b].1`.
    /// Results are stored column by column in job order.
    pub fn apply_at(&self, weights: &DMatrix<f64>, jobs: &[(&[f64], &[usize])]) -> DMatrix<f64> {
        let total: usize = jobs.iter().map(|(_, pos)| pos.len()).sum();
        let k = self.patch_len;
        let mut cols = DMatrix::<f64>::zeros(k, total);
        let data = cols.as_mut_slice();
        let mut col = 0;
        for (v, positions) in jobs {
            for &q in positions.iter() {
                let dst = &mut data[col * k..(col + 1) * k];
                for (d, &idx) in dst.iter_mut().zip(&self.gather[q * k..(q + 1) * k]) {
                    if idx != PADDED {
                        *d = v[idx as usize];
                    }
                }
                col += 1;
            }
        }
        weights * cols
    }

    /// Copies vector `b` of an [`apply`](Self::apply) result into `F × H′ × W′` layout.
    pub fn extract(&self, out: &DMatrix<f64>, b: usize, dst: &mut [f64]) {
        let p = self.positions;
        let filters = out.nrows();
        let block = &out.as_slice()[b * p * filters..(b + 1) * p * filters];
        for (q, column) in block.chunks_exact(filters).enumerate() {
            for (f, &v) in column.iter().enumerate() {
                dst[f * p + q] = v;
            }
        }
    }
}

/// Plain convolution of a complete image, with bias and optional ReLU.
pub fn classic_forward(
    image: &[f64],
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
) -> Result<FeatureMap> {
    Ok(classic_forward_batch(&[image], kernels, input, activation)?.remove(0))
}

/// Batched [`classic_forward`]: every image goes through a single im2col matrix product.
pub fn classic_forward_batch(
    images: &[&[f64]],
    kernels: &KernelStack,
    input: InputShape,
    activation: Activation,
) -> Result<Vec<FeatureMap>> {
    let plan = ConvPlan::new(kernels, input)?;
    for img in images {
        check_dim("image length", input.len(), img.len())?;
    }
    let out = plan.apply(&kernels.weight_matrix(), images);
    let p = plan.positions();
    Ok((0..images.len())
        .map(|b| {
            let mut data = vec![0.0; plan.output.len()];
            plan.extract(&out, b, &mut data);
            for (f, chunk) in data.chunks_mut(p).enumerate() {
                let bias = kernels.bias()[f];
                for v in chunk {
                    *v = activation.apply(*v + bias);
                }
            }
            FeatureMap {
                shape: plan.output,
                data,
            }
        })
        .collect())
}
