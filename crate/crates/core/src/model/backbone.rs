//! Small convolutional feature extractor standing in for a pretrained CNN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv2d, conv2d_backward, conv_output_size, maxpool2d, maxpool2d_backward, relu, relu_backward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    /// Follow the block with 2×2 stride-2 max pooling.
    pub pool: bool,
}

/// Conv → ReLU → optional max-pool blocks. Convolutions use stride 1 and
/// `kernel / 2` zero padding and carry no bias.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<ConvBlock>,
}

impl Default for BackboneConfig {
    /// Three 3×3 blocks of 16, 32 and 32 channels, each pooled, on 28×28
    /// single-channel crops.
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            input_height: 28,
            input_width: 28,
            blocks: [16, 32, 32]
                .into_iter()
                .map(|out_channels| ConvBlock {
                    out_channels,
                    kernel: 3,
                    pool: true,
                })
                .collect(),
        }
    }
}

impl BackboneConfig {
    /// `(channels, height, width)` of the final feature map.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        if self.input_channels == 0 || self.blocks.is_empty() {
            return Err(Error::Config(
                "backbone needs input channels and at least one block".into(),
            ));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "block {i}: need positive channels and an odd kernel, got {b:?}"
                )));
            }
            h = conv_output_size(h, b.kernel, 1, b.kernel / 2).map_err(|e| Error::Config(e.to_string()))?;
            w = conv_output_size(w, b.kernel, 1, b.kernel / 2).map_err(|e| Error::Config(e.to_string()))?;
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("block {i}: {h}x{w} map too small to pool")));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "final feature map is {h}x{w}; at least 2x2 is required"
            )));
        }
        let d = self.blocks.last().map(|b| b.out_channels).unwrap_or(0);
        Ok((d, h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub kernels: Vec<Tensor>,
}

/// Activations saved by `Backbone::forward`.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    /// Input of each block's convolution.
    inputs: Vec<Tensor>,
    /// Post-ReLU output of each block (the max-pool input).
    activations: Vec<Tensor>,
}

impl Backbone {
    /// He-normal kernels: `std = sqrt(2 / (c_in * k * k))`.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.feature_shape()?;
        let mut c_in = config.input_channels;
        let mut kernels = Vec::with_capacity(config.blocks.len());
        for b in &config.blocks {
            let fan_in = c_in * b.kernel * b.kernel;
            kernels.push(Tensor::randn(
                &[b.out_channels, c_in, b.kernel, b.kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ));
            c_in = b.out_channels;
        }
        Ok(Backbone { config, kernels })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let expected = [
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ];
        if input.rank() != 4 || input.shape()[1..] != expected {
            return Err(Error::dim(format!(
                "backbone expects [N, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                input.shape()
            )));
        }
        let mut inputs = Vec::with_capacity(self.kernels.len());
        let mut activations = Vec::with_capacity(self.kernels.len());
        let mut x = input.clone();
        for (block, kernel) in self.config.blocks.iter().zip(&self.kernels) {
            let a = relu(&conv2d(&x, kernel, 1, block.kernel / 2)?);
            inputs.push(x);
            x = if block.pool { maxpool2d(&a, 2, 2)? } else { a.clone() };
            activations.push(a);
        }
        Ok((x, BackboneCache { inputs, activations }))
    }

    /// Kernel gradients for an upstream gradient on the final feature map.
    pub fn backward(&self, cache: &BackboneCache, d_features: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = vec![None; self.kernels.len()];
        let mut d = d_features.clone();
        for i in (0..self.kernels.len()).rev() {
            let block = &self.config.blocks[i];
            let act = &cache.activations[i];
            if block.pool {
                d = maxpool2d_backward(act, 2, 2, &d)?;
            }
            // relu'(pre) == relu'(post) for the chosen zero subgradient
            d = relu_backward(act, &d)?;
            let g = conv2d_backward(&cache.inputs[i], &self.kernels[i], 1, block.kernel / 2, &d)?;
            grads[i] = g.d_params.into_iter().next();
            d = g.d_input;
        }
        Ok(grads
            .into_iter()
            .map(|g| g.expect("every block produced a gradient"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_feature_shape() {
        assert_eq!(BackboneConfig::default().feature_shape().unwrap(), (32, 3, 3));
        let cfg = BackboneConfig {
            input_height: 32,
            input_width: 32,
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.feature_shape().unwrap(), (32, 4, 4));
    }

    #[test]
    fn too_small_input_is_config_error() {
        let cfg = BackboneConfig {
            input_height: 4,
            input_width: 4,
            ..BackboneConfig::default()
        };
        assert!(matches!(cfg.feature_shape(), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Backbone::init(cfg, &mut rng).is_err());
    }

    #[test]
    fn forward_shape_and_wrong_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::init(BackboneConfig::default(), &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 28, 28], 1.0, &mut rng);
        let (f, _) = bb.forward(&x).unwrap();
        assert_eq!(f.shape(), &[1, 32, 3, 3]);
        assert!(bb.forward(&Tensor::zeros(&[1, 1, 32, 32])).is_err());
    }
}
