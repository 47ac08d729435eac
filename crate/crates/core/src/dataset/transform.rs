use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut images = Vec::new();
        for s in samples {
            let ch = s.image.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; ch];
            } else if sum.len() != ch {
                return Err(Error::dim("samples disagree on channel count"));
            }
            let plane = s.image.len() / ch;
            for (c, chunk) in s.image.data().chunks_exact(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
            }
            count += plane;
            images.push(&s.image);
        }
        if images.is_empty() {
            return Err(Error::Data("cannot compute statistics of an empty fold".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for img in images {
            let plane = img.len() / mean.len();
            for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
                var[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Ok(ChannelStats { mean, std })
    }

    /// `(x - mean) / max(std, 1e-6)` per channel.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let ch = image.shape()[0];
        if ch != self.mean.len() {
            return Err(Error::dim(format!(
                "image has {ch} channels, statistics have {}",
                self.mean.len()
            )));
        }
        let plane = image.len() / ch;
        let mut out = image.clone();
        for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c].max(STD_FLOOR));
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_all(&self, samples: &mut [Sample]) -> Result<()> {
        for s in samples {
            s.image = self.apply(&s.image)?;
        }
        Ok(())
    }
}

fn crop_at(image: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[ch, h, w] = image.shape() else {
        return Err(Error::dim(format!("image must be [C, H, W], got {:?}", image.shape())));
    };
    let mut data = Vec::with_capacity(ch * out_h * out_w);
    for c in 0..ch {
        for y in top..top + out_h {
            let row = (c * h + y) * w;
            data.extend_from_slice(&image.data()[row + left..row + left + out_w]);
        }
    }
    Tensor::new(vec![ch, out_h, out_w], data)
}

fn check_crop(image: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::dim(format!("image must be [C, H, W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::dim(format!("crop {out_h}x{out_w} does not fit image {h}x{w}")));
    }
    Ok((h, w))
}

pub fn center_crop(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = check_crop(image, out_h, out_w)?;
    crop_at(image, (h - out_h) / 2, (w - out_w) / 2, out_h, out_w)
}

/// Uniformly placed crop when training, centre crop otherwise.
pub fn random_crop(image: &Tensor, out_h: usize, out_w: usize, training: bool, seed: u64) -> Result<Tensor> {
    let (h, w) = check_crop(image, out_h, out_w)?;
    if !training {
        return center_crop(image, out_h, out_w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - out_h);
    let left = rng.random_range(0..=w - out_w);
    crop_at(image, top, left, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LabelVector;

    fn sample(image: Tensor) -> Sample {
        Sample {
            image,
            labels: LabelVector::new(vec![1]).unwrap(),
            group_id: 0,
        }
    }

    fn ramp(ch: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![ch, h, w], (0..ch * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn crop_identity_and_center() {
        let img = ramp(1, 32, 32);
        assert_eq!(random_crop(&img, 32, 32, true, 5).unwrap(), img);
        let c = random_crop(&img, 28, 28, false, 5).unwrap();
        assert_eq!(c.shape(), &[1, 28, 28]);
        assert_eq!(c.data()[0], (2 * 32 + 2) as f64);
        assert!(random_crop(&img, 33, 28, true, 0).is_err());
    }

    #[test]
    fn training_crops_are_reproducible() {
        let img = ramp(2, 10, 12);
        let a = random_crop(&img, 6, 7, true, 99).unwrap();
        assert_eq!(a, random_crop(&img, 6, 7, true, 99).unwrap());
        let offsets: std::collections::BTreeSet<u64> = (0..50)
            .map(|s| random_crop(&img, 6, 7, true, s).unwrap().data()[0] as u64)
            .collect();
        assert!(offsets.len() > 5);
    }

    #[test]
    fn normalisation_uses_train_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut train: Vec<Sample> = (0..20)
            .map(|_| sample(Tensor::uniform(&[2, 4, 4], 0.0, 1.0, &mut rng)))
            .collect();
        let stats = ChannelStats::compute(&train).unwrap();
        stats.apply_all(&mut train).unwrap();
        let after = ChannelStats::compute(&train).unwrap();
        for c in 0..2 {
            assert!(after.mean[c].abs() < 1e-10);
            assert!((after.std[c] - 1.0).abs() < 1e-10);
        }
        let test_img = Tensor::full(&[2, 4, 4], 0.5);
        let t = stats.apply(&test_img).unwrap();
        let expected = (0.5 - stats.mean[0]) / stats.std[0];
        assert!((t.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let s = vec![sample(Tensor::full(&[1, 3, 3], 0.7)); 3];
        let stats = ChannelStats::compute(&s).unwrap();
        let out = stats.apply(&s[0].image).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-8));
        assert!(ChannelStats::compute(&[] as &[Sample]).is_err());
    }
}
