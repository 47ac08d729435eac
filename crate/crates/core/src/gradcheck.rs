//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check reduces an operation to a scalar `L(x) = Σ r ⊙ op(x)` with a
//! fixed random `r`, then compares the analytic gradient against
//! `(L(x + h) - L(x - h)) / 2h` coordinate by coordinate. The error measure
//! is `‖a - n‖ / max(‖a‖, ‖n‖)`, which stays meaningful when individual
//! gradient entries are close to zero.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilinear::{
    bilinear_pool, bilinear_pool_backward, l2_normalize, l2_normalize_backward, signed_sqrt, signed_sqrt_backward,
    BilinearHead, FeatureMap,
};
use crate::error::{Error, Result};
use crate::layers::{
    affine, affine_backward, conv2d, conv2d_backward, dropout, dropout_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, sigmoid, sigmoid_backward,
};
use crate::losses::{msml, sigmoid_bce, LabelVector, Logits, LossWeights};
use crate::model::{BackboneConfig, BaselineModel, ConvBlock, Model, Objective, TwoStreamModel};
use crate::seed;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for individual operations, losses and the bilinear chain.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Parameters sampled per whole-model check.
pub const MODEL_SUBSET: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Layers,
    Losses,
    Bilinear,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Layers, Scope::Losses, Scope::Bilinear, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Layers => "layers",
            Scope::Losses => "losses",
            Scope::Bilinear => "bilinear",
            Scope::Model => "model",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown gradcheck scope {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

/// `perturb` scales every analytic gradient by `1 + perturb`, simulating a
/// broken backward pass so the harness itself can be tested.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Options {
    pub seed: u64,
    pub perturb: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` for the coordinates in `coords`.
pub fn numeric_gradient(x: &Tensor, coords: &[usize], f: impl Fn(&Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + STEP;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - STEP;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * STEP))
        })
        .collect()
}

struct Checker {
    rng: ChaCha8Rng,
    perturb: f64,
    results: Vec<CheckResult>,
}

impl Checker {
    fn new(opts: Options, scope: Scope) -> Self {
        Checker {
            rng: ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, scope as u64)),
            perturb: opts.perturb,
            results: Vec::new(),
        }
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Standard normal entries pushed at least `gap` away from zero.
    fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor {
        self.randn(shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
    }

    fn record(&mut self, name: &str, tolerance: f64, analytic: &[f64], numeric: &[f64]) {
        let scaled: Vec<f64> = analytic.iter().map(|a| a * (1.0 + self.perturb)).collect();
        self.results.push(CheckResult {
            name: name.to_string(),
            rel_err: relative_error(&scaled, numeric),
            tolerance,
        });
    }

    /// Checks every coordinate of `x`.
    fn full(&mut self, name: &str, x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> Result<f64>) -> Result<()> {
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(x, &coords, f)?;
        self.record(name, OP_TOLERANCE, analytic.data(), &numeric);
        Ok(())
    }
}

fn weighted(r: &Tensor, out: &Tensor) -> f64 {
    r.dot(out)
}

fn layers(c: &mut Checker) -> Result<()> {
    let x = c.randn(&[3, 5]);
    let w = c.randn(&[5, 4]);
    let b = c.randn(&[4]);
    let r = c.randn(&[3, 4]);
    let g = affine_backward(&x, &w, &r)?;
    c.full("affine.input", &x, &g.d_input, |x| {
        Ok(weighted(&r, &affine(x, &w, &b)?))
    })?;
    c.full("affine.weight", &w, &g.d_params[0], |w| {
        Ok(weighted(&r, &affine(&x, w, &b)?))
    })?;
    c.full("affine.bias", &b, &g.d_params[1], |b| {
        Ok(weighted(&r, &affine(&x, &w, b)?))
    })?;

    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let x = c.randn(&[2, 2, 6, 5]);
        let k = c.randn(&[3, 2, 3, 3]);
        let out = conv2d(&x, &k, stride, pad)?;
        let r = c.randn(out.shape());
        let g = conv2d_backward(&x, &k, stride, pad, &r)?;
        c.full(&format!("conv2d[s{stride},p{pad}].input"), &x, &g.d_input, |x| {
            Ok(weighted(&r, &conv2d(x, &k, stride, pad)?))
        })?;
        c.full(&format!("conv2d[s{stride},p{pad}].kernel"), &k, &g.d_params[0], |k| {
            Ok(weighted(&r, &conv2d(&x, k, stride, pad)?))
        })?;
    }

    // Distinct, well-separated values keep every pooling window's argmax
    // stable under the finite-difference step.
    let n = 2 * 2 * 6 * 6;
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        values.swap(i, c.rng.random_range(0..=i));
    }
    let x = Tensor::new(vec![2, 2, 6, 6], values)?;
    let r = c.randn(&[2, 2, 3, 3]);
    let d = maxpool2d_backward(&x, 2, 2, &r)?;
    c.full("maxpool2d.input", &x, &d, |x| Ok(weighted(&r, &maxpool2d(x, 2, 2)?)))?;

    let x = c.away_from_zero(&[4, 6], 1e-3);
    let r = c.randn(&[4, 6]);
    c.full("relu.input", &x, &relu_backward(&x, &r)?, |x| {
        Ok(weighted(&r, &relu(x)))
    })?;

    let x = c.randn(&[4, 6]).map(|v| 3.0 * v);
    let r = c.randn(&[4, 6]);
    let d = sigmoid_backward(&sigmoid(&x), &r)?;
    c.full("sigmoid.input", &x, &d, |x| Ok(weighted(&r, &sigmoid(x))))?;

    let x = c.randn(&[4, 6]);
    let r = c.randn(&[4, 6]);
    let drop_seed = c.rng.random();
    let d = dropout_backward(&r, 0.5, true, drop_seed)?;
    c.full("dropout.input", &x, &d, |x| {
        Ok(weighted(&r, &dropout(x, 0.5, true, drop_seed)?))
    })?;
    Ok(())
}

fn label_cases(c: &mut Checker, classes: usize) -> Vec<(String, LabelVector)> {
    let mut cases = vec![
        (
            "one-positive".to_string(),
            LabelVector::from_positives(classes, &[0]).expect("valid class"),
        ),
        (
            "all-but-one".to_string(),
            LabelVector::from_positives(classes, &(1..classes).collect::<Vec<_>>()).expect("valid"),
        ),
    ];
    let random: Vec<u8> = (0..classes).map(|_| u8::from(c.rng.random_bool(0.4))).collect();
    let mut random = random;
    random[1] = 1;
    random[2] = 0;
    cases.push(("random".to_string(), LabelVector::new(random).expect("binary labels")));
    cases
}

fn losses(c: &mut Checker) -> Result<()> {
    let classes = 6;
    for (case, labels) in label_cases(c, classes) {
        let x = c.randn(&[classes]).map(|v| 2.0 * v);
        let (_, g) = sigmoid_bce(&Logits::new(x.data().to_vec())?, &labels)?;
        c.full(&format!("sigmoid_bce[{case}]"), &x, &Tensor::vector(g), |x| {
            Ok(sigmoid_bce(&Logits::new(x.data().to_vec())?, &labels)?.0)
        })?;
        let (_, g) = msml(&Logits::new(x.data().to_vec())?, &labels)?;
        c.full(&format!("msml[{case}]"), &x, &Tensor::vector(g), |x| {
            Ok(msml(&Logits::new(x.data().to_vec())?, &labels)?.0)
        })?;
    }
    // Large logits exercise the log-sum-exp path.
    let labels = LabelVector::from_positives(classes, &[1, 4]).expect("valid classes");
    let x = c.randn(&[classes]).map(|v| 40.0 + 5.0 * v);
    let (_, g) = msml(&Logits::new(x.data().to_vec())?, &labels)?;
    c.full("msml[large-logits]", &x, &Tensor::vector(g), |x| {
        Ok(msml(&Logits::new(x.data().to_vec())?, &labels)?.0)
    })?;
    Ok(())
}

fn positive_map(c: &mut Checker, shape: &[usize]) -> Result<FeatureMap> {
    FeatureMap::new(Tensor::uniform(shape, 0.1, 1.0, &mut c.rng))
}

fn bilinear(c: &mut Checker) -> Result<()> {
    let f1 = positive_map(c, &[3, 2, 3])?;
    let f2 = positive_map(c, &[4, 2, 3])?;
    let r = c.randn(&[12]);
    let (d1, d2) = bilinear_pool_backward(&f1, &f2, r.data())?;
    let pool = |a: &Tensor, b: &Tensor| -> Result<f64> {
        let p = bilinear_pool(&FeatureMap::new(a.clone())?, &FeatureMap::new(b.clone())?)?;
        Ok(weighted(&r, &Tensor::vector(p)))
    };
    c.full("bilinear_pool.f1", f1.tensor(), &d1, |a| pool(a, f2.tensor()))?;
    c.full("bilinear_pool.f2", f2.tensor(), &d2, |b| pool(f1.tensor(), b))?;

    let v = c.away_from_zero(&[8], 0.1);
    let r = c.randn(&[8]);
    let d = Tensor::vector(signed_sqrt_backward(v.data(), r.data()));
    c.full("signed_sqrt", &v, &d, |v| {
        Ok(weighted(&r, &Tensor::vector(signed_sqrt(v.data()))))
    })?;

    let v = c.randn(&[8]);
    let d = Tensor::vector(l2_normalize_backward(v.data(), r.data()));
    c.full("l2_normalize", &v, &d, |v| {
        Ok(weighted(&r, &Tensor::vector(l2_normalize(v.data()))))
    })?;

    let head = BilinearHead::init(3, 4, 5, 3, &mut c.rng);
    let r = c.randn(&[3]);
    let (_, cache) = head.forward(&f1, &f2)?;
    let g = head.backward(&f1, &f2, &cache, r.data())?;
    let chain = |h: &BilinearHead, a: &Tensor, b: &Tensor| -> Result<f64> {
        let (logits, _) = h.forward(&FeatureMap::new(a.clone())?, &FeatureMap::new(b.clone())?)?;
        Ok(weighted(&r, &Tensor::vector(logits)))
    };
    c.full("bilinear_head.f1", f1.tensor(), &g.d_f1, |a| {
        chain(&head, a, f2.tensor())
    })?;
    c.full("bilinear_head.f2", f2.tensor(), &g.d_f2, |b| {
        chain(&head, f1.tensor(), b)
    })?;
    let names = ["proj.weight", "proj.bias", "cls.weight", "cls.bias"];
    for (i, name) in names.iter().enumerate() {
        let p = head.params()[i].clone();
        c.full(&format!("bilinear_head.{name}"), &p, &g.d_params[i], |p| {
            let mut h = head.clone();
            *h.params_mut()[i] = p.clone();
            chain(&h, f1.tensor(), f2.tensor())
        })?;
    }
    Ok(())
}

/// Small architecture used by whole-model checks: 8×8 inputs, two blocks,
/// four classes.
pub fn model_check_config() -> BackboneConfig {
    BackboneConfig {
        input_channels: 1,
        input_height: 8,
        input_width: 8,
        blocks: vec![
            ConvBlock {
                out_channels: 3,
                kernel: 3,
                pool: true,
            },
            ConvBlock {
                out_channels: 4,
                kernel: 3,
                pool: false,
            },
        ],
    }
}

fn whole_model(c: &mut Checker, name: &str, model: &Model, objective: Objective) -> Result<()> {
    let image = c.randn(&[1, 1, 8, 8]);
    let labels = LabelVector::from_positives(4, &[1, 3]).expect("valid classes");
    let drop_seed: u64 = c.rng.random();
    let (_, grads) = model.loss_and_grad(&image, &labels, objective, true, drop_seed)?;

    // Sample coordinates uniformly over the concatenation of the parameters
    // the objective trains; frozen ones deliberately report zero gradients.
    let mask = model.trainable_mask(objective);
    let sizes: Vec<usize> = model
        .params()
        .iter()
        .zip(&mask)
        .map(|(t, &on)| if on { t.len() } else { 0 })
        .collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(&mut c.rng, total, MODEL_SUBSET.min(total)).into_vec();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        analytic.push(grads[t].data()[i]);
        let loss = |p: &Tensor| -> Result<f64> {
            let mut m = model.clone();
            *m.params_mut()[t] = p.clone();
            let (parts, _) = m.loss_and_grad(&image, &labels, objective, true, drop_seed)?;
            Ok(m.objective_value(&parts, objective))
        };
        numeric.extend(numeric_gradient(model.params()[t], &[i], loss)?);
    }
    c.record(name, MODEL_TOLERANCE, &analytic, &numeric);
    Ok(())
}

fn model(c: &mut Checker) -> Result<()> {
    let build_seed = c.rng.random();
    let two = Model::TwoStream(TwoStreamModel::build(
        model_check_config(),
        4,
        6,
        0.5,
        LossWeights::default(),
        build_seed,
    )?);
    for (objective, label) in [
        (Objective::Joint, "joint"),
        (Objective::Streams, "streams"),
        (Objective::BilinearOnly, "bilinear-only"),
    ] {
        whole_model(c, &format!("two_stream[{label}]"), &two, objective)?;
    }
    let base = Model::Baseline(BaselineModel::build(model_check_config(), 4, 0.5, build_seed)?);
    whole_model(c, "baseline", &base, Objective::Joint)
}

/// Runs every check of `scope`.
pub fn run(scope: Scope, opts: Options) -> Result<Vec<CheckResult>> {
    let mut c = Checker::new(opts, scope);
    match scope {
        Scope::Layers => layers(&mut c)?,
        Scope::Losses => losses(&mut c)?,
        Scope::Bilinear => bilinear(&mut c)?,
        Scope::Model => model(&mut c)?,
    }
    Ok(c.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        let a = relative_error(&[1.0, 2.0], &[1.0, 2.001]);
        let b = relative_error(&[1e6, 2e6], &[1e6, 2.001e6]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = numeric_gradient(&x, &[0, 1, 2], |x| Ok(x.data().iter().map(|v| v * v).sum())).unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn scopes_parse() {
        for s in Scope::ALL {
            assert_eq!(s.name().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }
}
