use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::losses::LabelVector;
use crate::seed;
use crate::tensor::Tensor;

/// Mean intensity of the image background.
pub const BACKGROUND_LEVEL: f64 = 0.2;
/// Peak intensity added by one class template.
pub const TEMPLATE_AMPLITUDE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub num_samples: usize,
    pub num_groups: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub class_prevalence: Vec<f64>,
    /// `(a, b, boost)`: when `a` is drawn, `b`'s probability rises by `boost`.
    pub cooccurrence: Vec<(usize, usize, f64)>,
    /// Fraction of samples forced to carry no label at all.
    pub normal_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_classes: 8,
            num_samples: 2000,
            num_groups: 100,
            image_height: 32,
            image_width: 32,
            channels: 1,
            class_prevalence: vec![0.25, 0.18, 0.12, 0.09, 0.06, 0.04, 0.03, 0.02],
            cooccurrence: vec![(0, 1, 0.15), (2, 3, 0.10)],
            normal_fraction: 0.5,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_samples == 0 || self.num_groups == 0 {
            return bad("num_classes, num_samples and num_groups must be positive".into());
        }
        if self.channels == 0 || self.image_height < 4 || self.image_width < 4 {
            return bad("images need at least one channel and 4x4 pixels".into());
        }
        if self.class_prevalence.len() != self.num_classes {
            return bad(format!(
                "{} prevalences for {} classes",
                self.class_prevalence.len(),
                self.num_classes
            ));
        }
        if let Some(p) = self.class_prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return bad(format!("prevalence {p} not in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.normal_fraction) {
            return bad(format!("normal_fraction {} not in [0, 1]", self.normal_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and nonnegative",
                self.noise_sigma
            ));
        }
        let mut boosted = self.class_prevalence.clone();
        for &(a, b, boost) in &self.cooccurrence {
            if a >= self.num_classes || b >= self.num_classes || a == b {
                return bad(format!("co-occurrence pair ({a}, {b}) is invalid"));
            }
            if !(0.0..=1.0).contains(&boost) {
                return bad(format!("boost {boost} not in [0, 1]"));
            }
            boosted[b] += boost;
        }
        if let Some((c, p)) = boosted.iter().enumerate().find(|(_, p)| **p > 1.0) {
            return bad(format!("boosted probability of class {c} is {p} > 1"));
        }
        Ok(())
    }
}

/// Fixed bar-shaped template for `class`: an oriented Gaussian ridge whose
/// angle and centre depend only on the class index, so templates of
/// different classes overlap but remain distinct.
pub fn class_template(class: usize, num_classes: usize, height: usize, width: usize) -> Vec<f64> {
    let size = height.min(width) as f64;
    let angle = PI * class as f64 / num_classes as f64;
    let frac = |x: f64| x - x.floor();
    let cy = height as f64 * (0.3 + 0.4 * frac(0.618_034 * class as f64 + 0.25));
    let cx = width as f64 * (0.3 + 0.4 * frac(0.381_966 * class as f64 + 0.5));
    let half_len = 0.25 * size;
    let sigma = 0.04 * size;
    let (dir_y, dir_x) = (angle.sin(), angle.cos());
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let along = dy * dir_y + dx * dir_x;
            let across = -dy * dir_x + dx * dir_y;
            // ridge profile across, soft cut-off beyond the bar's ends
            let overhang = (along.abs() - half_len).max(0.0);
            let v = (-(across * across + overhang * overhang) / (2.0 * sigma * sigma)).exp();
            out.push(TEMPLATE_AMPLITUDE * v);
        }
    }
    out
}

fn draw_labels(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let normal = rng.random::<f64>() < spec.normal_fraction;
    let u: Vec<f64> = (0..spec.num_classes).map(|_| rng.random::<f64>()).collect();
    if normal {
        return vec![0; spec.num_classes];
    }
    let mut prob = spec.class_prevalence.clone();
    let mut bits: Vec<u8> = u.iter().zip(&prob).map(|(u, p)| u8::from(u < p)).collect();
    for &(a, b, boost) in &spec.cooccurrence {
        if bits[a] == 1 {
            prob[b] += boost;
            bits[b] = u8::from(u[b] < prob[b]);
        }
    }
    bits
}

/// Deterministic under `spec.seed`; sample `i` draws from its own derived
/// stream, so generation is order-independent.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (h, w, ch) = (spec.image_height, spec.image_width, spec.channels);
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| class_template(c, spec.num_classes, h, w))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    (0..spec.num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, i as u64));
            let group_id = rng.random_range(0..spec.num_groups) as u32;
            let bits = draw_labels(spec, &mut rng);
            let mut clean = vec![BACKGROUND_LEVEL; h * w];
            for (c, t) in templates.iter().enumerate() {
                if bits[c] == 1 {
                    for (p, v) in clean.iter_mut().zip(t) {
                        *p += v;
                    }
                }
            }
            let mut data = Vec::with_capacity(ch * h * w);
            for _ in 0..ch {
                for &p in &clean {
                    let v = (p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    // stored on disk as f32; keep values exactly representable
                    data.push(v as f32 as f64);
                }
            }
            Ok(Sample {
                image: Tensor::new(vec![ch, h, w], data)?,
                labels: LabelVector::new(bits)?,
                group_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_samples: 200,
            seed,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn noiseless_single_class_is_background_plus_template() {
        let spec = GeneratorSpec {
            noise_sigma: 0.0,
            num_samples: 400,
            ..GeneratorSpec::default()
        };
        let samples = generate(&spec).unwrap();
        let s = samples
            .iter()
            .find(|s| s.labels.num_positives() == 1)
            .expect("some single-label sample");
        let c = s.labels.positives().next().unwrap();
        let t = class_template(c, 8, 32, 32);
        for (got, tv) in s.image.data().iter().zip(&t) {
            assert_eq!(*got, ((BACKGROUND_LEVEL + tv).clamp(0.0, 1.0)) as f32 as f64);
        }
        let normal = samples.iter().find(|s| s.labels.is_normal()).unwrap();
        assert!(normal.image.data().iter().all(|&v| v == BACKGROUND_LEVEL as f32 as f64));
    }

    #[test]
    fn all_normal_when_fraction_is_one() {
        let spec = GeneratorSpec {
            normal_fraction: 1.0,
            ..small(1)
        };
        assert!(generate(&spec).unwrap().iter().all(|s| s.labels.is_normal()));
    }

    #[test]
    fn images_in_unit_interval() {
        let samples = generate(&small(9)).unwrap();
        assert!(samples
            .iter()
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(samples.iter().all(|s| (s.group_id as usize) < 100));
    }

    #[test]
    fn templates_are_distinct() {
        let ts: Vec<Vec<f64>> = (0..8).map(|c| class_template(c, 8, 32, 32)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                let d: f64 = ts[i].iter().zip(&ts[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1.0, "templates {i} and {j} nearly equal");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = GeneratorSpec::default();
        s.class_prevalence[0] = 1.5;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        let s = GeneratorSpec {
            normal_fraction: 1.2,
            ..GeneratorSpec::default()
        };
        assert!(s.validate().is_err());
        let s = GeneratorSpec {
            cooccurrence: vec![(0, 1, 0.9)],
            ..GeneratorSpec::default()
        };
        assert!(s.validate().is_err());
        let s = GeneratorSpec {
            cooccurrence: vec![(0, 8, 0.1)],
            ..GeneratorSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
