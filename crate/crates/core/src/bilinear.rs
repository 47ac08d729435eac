//! Bilinear pooling of two feature maps and the fine-grained classifier head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{affine, affine_backward};
use crate::tensor::Tensor;

/// Per-sample spatial feature map of shape `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::dim(format!(
                "feature map must be [d, H, W], got {:?}",
                data.shape()
            )));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

fn check_spatial(f1: &FeatureMap, f2: &FeatureMap) -> Result<()> {
    if f1.height() != f2.height() || f1.width() != f2.width() {
        return Err(Error::dim(format!(
            "bilinear inputs differ spatially: {:?} vs {:?}",
            f1.tensor().shape(),
            f2.tensor().shape()
        )));
    }
    Ok(())
}

/// Spatial mean of the outer products `f1[:, i, j] ⊗ f2[:, i, j]`,
/// vectorised row-major (`a * d2 + b`).
pub fn bilinear_pool(f1: &FeatureMap, f2: &FeatureMap) -> Result<Vec<f64>> {
    check_spatial(f1, f2)?;
    let (d1, d2) = (f1.channels(), f2.channels());
    let hw = f1.height() * f1.width();
    let a = f1.tensor().data();
    let b = f2.tensor().data();
    let inv = 1.0 / hw as f64;
    let mut out = vec![0.0; d1 * d2];
    for (i, row_a) in a.chunks_exact(hw).enumerate() {
        for (j, row_b) in b.chunks_exact(hw).enumerate() {
            let s: f64 = row_a.iter().zip(row_b).map(|(x, y)| x * y).sum();
            out[i * d2 + j] = s * inv;
        }
    }
    Ok(out)
}

/// Gradients of `bilinear_pool` with respect to both maps.
pub fn bilinear_pool_backward(f1: &FeatureMap, f2: &FeatureMap, d_out: &[f64]) -> Result<(Tensor, Tensor)> {
    check_spatial(f1, f2)?;
    let (d1, d2) = (f1.channels(), f2.channels());
    if d_out.len() != d1 * d2 {
        return Err(Error::dim(format!(
            "bilinear gradient has {} entries, expected {}",
            d_out.len(),
            d1 * d2
        )));
    }
    let hw = f1.height() * f1.width();
    let a = f1.tensor().data();
    let b = f2.tensor().data();
    let inv = 1.0 / hw as f64;
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for i in 0..d1 {
        let row_a = &a[i * hw..(i + 1) * hw];
        for j in 0..d2 {
            let g = d_out[i * d2 + j] * inv;
            if g == 0.0 {
                continue;
            }
            let row_b = &b[j * hw..(j + 1) * hw];
            for (d, y) in da[i * hw..(i + 1) * hw].iter_mut().zip(row_b) {
                *d += g * y;
            }
            for (d, x) in db[j * hw..(j + 1) * hw].iter_mut().zip(row_a) {
                *d += g * x;
            }
        }
    }
    Ok((
        Tensor::new(f1.tensor().shape().to_vec(), da)?,
        Tensor::new(f2.tensor().shape().to_vec(), db)?,
    ))
}

/// Smoothing added to the signed-sqrt derivative, which is unbounded at 0.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;
/// Norm floor for `l2_normalize`.
pub const L2_EPS: f64 = 1e-12;

pub fn signed_sqrt(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * x.abs().sqrt()).collect()
}

pub fn signed_sqrt_backward(v: &[f64], d_out: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(d_out)
        .map(|(&x, &g)| g / (2.0 * x.abs().sqrt() + SIGNED_SQRT_EPS))
        .collect()
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let denom = l2_norm(v).max(L2_EPS);
    v.iter().map(|x| x / denom).collect()
}

pub fn l2_normalize_backward(v: &[f64], d_out: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= L2_EPS {
        return d_out.iter().map(|g| g / L2_EPS).collect();
    }
    // d/dv (v/|v|) = (I - u u^T) / |v|
    let proj: f64 = v.iter().zip(d_out).map(|(x, g)| x * g).sum::<f64>() / norm;
    v.iter().zip(d_out).map(|(x, g)| (g - proj * x / norm) / norm).collect()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fine-grained classifier over the pooled bilinear feature:
/// pool → signed sqrt → L2 → projection (the 1×1 conv at unit spatial
/// extent) → linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearHead {
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

/// Intermediate values kept from `BilinearHead::forward` for the backward pass.
#[derive(Clone, Debug)]
pub struct BilinearCache {
    pooled: Vec<f64>,
    rooted: Vec<f64>,
    normed: Tensor,
    projected: Tensor,
}

/// Gradients of the full bilinear head.
#[derive(Clone, Debug)]
pub struct BilinearGrad {
    pub d_f1: Tensor,
    pub d_f2: Tensor,
    /// Same order as `BilinearHead::params`.
    pub d_params: Vec<Tensor>,
}

impl BilinearHead {
    /// Normal init with `std = sqrt(1 / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(d1: usize, d2: usize, proj_width: usize, num_classes: usize, rng: &mut R) -> Self {
        let fan = d1 * d2;
        BilinearHead {
            proj_weight: Tensor::randn(&[fan, proj_width], (1.0 / fan as f64).sqrt(), rng),
            proj_bias: Tensor::zeros(&[proj_width]),
            cls_weight: Tensor::randn(&[proj_width, num_classes], (1.0 / proj_width as f64).sqrt(), rng),
            cls_bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.proj_weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.cls_bias.len()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.proj_weight, &self.proj_bias, &self.cls_weight, &self.cls_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.cls_weight,
            &mut self.cls_bias,
        ]
    }

    pub fn forward(&self, f1: &FeatureMap, f2: &FeatureMap) -> Result<(Vec<f64>, BilinearCache)> {
        let pooled = bilinear_pool(f1, f2)?;
        if pooled.len() != self.input_len() {
            return Err(Error::dim(format!(
                "bilinear feature of length {} ({}x{} channels) for a head expecting {}",
                pooled.len(),
                f1.channels(),
                f2.channels(),
                self.input_len()
            )));
        }
        let rooted = signed_sqrt(&pooled);
        let normed = Tensor::new(vec![1, rooted.len()], l2_normalize(&rooted))?;
        let projected = affine(&normed, &self.proj_weight, &self.proj_bias)?;
        let logits = affine(&projected, &self.cls_weight, &self.cls_bias)?;
        Ok((
            logits.into_data(),
            BilinearCache {
                pooled,
                rooted,
                normed,
                projected,
            },
        ))
    }

    pub fn backward(
        &self,
        f1: &FeatureMap,
        f2: &FeatureMap,
        cache: &BilinearCache,
        d_logits: &[f64],
    ) -> Result<BilinearGrad> {
        let d_logits = Tensor::new(vec![1, d_logits.len()], d_logits.to_vec())?;
        let cls = affine_backward(&cache.projected, &self.cls_weight, &d_logits)?;
        let proj = affine_backward(&cache.normed, &self.proj_weight, &cls.d_input)?;
        let d_rooted = l2_normalize_backward(&cache.rooted, proj.d_input.data());
        let d_pooled = signed_sqrt_backward(&cache.pooled, &d_rooted);
        let (d_f1, d_f2) = bilinear_pool_backward(f1, f2, &d_pooled)?;
        let [d_pw, d_pb] = <[Tensor; 2]>::try_from(proj.d_params).expect("affine has two params");
        let [d_cw, d_cb] = <[Tensor; 2]>::try_from(cls.d_params).expect("affine has two params");
        Ok(BilinearGrad {
            d_f1,
            d_f2,
            d_params: vec![d_pw, d_pb, d_cw, d_cb],
        })
    }
}
