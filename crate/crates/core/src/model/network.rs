//! Single-stream baseline and the two-stream bilinear network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearHead, FeatureMap};
use crate::error::{Error, Result};
use crate::layers::{affine, affine_backward, dropout, dropout_backward, sigmoid_scalar};
use crate::losses::{msml, sigmoid_bce, LabelVector, Logits, LossWeights};
use crate::model::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::seed;
use crate::tensor::Tensor;

/// Width of the projection in front of the fine-grained classifier.
pub const DEFAULT_PROJECTION_WIDTH: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Linear classifier over the flattened feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn init(inputs: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearHead {
            weight: Tensor::randn(&[inputs, classes], (1.0 / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    /// Dropout on the input, then the affine map. Returns `(dropped, logits)`.
    fn forward(&self, features: &Tensor, rate: f64, training: bool, seed: u64) -> Result<(Tensor, Vec<f64>)> {
        let flat = features.clone().reshape(&[1, features.len()])?;
        let dropped = dropout(&flat, rate, training, seed)?;
        let logits = affine(&dropped, &self.weight, &self.bias)?;
        Ok((dropped, logits.into_data()))
    }

    /// Returns `(d_features, d_weight, d_bias)`; `d_features` has the shape of `features`.
    fn backward(
        &self,
        features: &Tensor,
        dropped: &Tensor,
        d_logits: &[f64],
        rate: f64,
        training: bool,
        seed: u64,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let d_logits = Tensor::new(vec![1, d_logits.len()], d_logits.to_vec())?;
        let g = affine_backward(dropped, &self.weight, &d_logits)?;
        let d_flat = dropout_backward(&g.d_input, rate, training, seed)?;
        let mut params = g.d_params.into_iter();
        Ok((
            d_flat.reshape(features.shape())?,
            params.next().expect("weight grad"),
            params.next().expect("bias grad"),
        ))
    }
}

/// Which part of the objective a gradient step optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `alpha * (ce + msml) + beta * fce` through every parameter.
    Joint,
    /// `alpha * (ce + msml)`: each stream with its own head, bilinear head untouched.
    Streams,
    /// `beta * fce` through the bilinear head only; backbones frozen.
    BilinearOnly,
}

/// Raw (unweighted) per-sample loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub msml: f64,
    pub fce: f64,
}

impl LossParts {
    pub fn add(&mut self, other: &LossParts) {
        self.ce += other.ce;
        self.msml += other.msml;
        self.fce += other.fce;
    }

    pub fn scaled(&self, k: f64) -> LossParts {
        LossParts {
            ce: self.ce * k,
            msml: self.msml * k,
            fce: self.fce * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.msml.is_finite() && self.fce.is_finite()
    }
}

/// Parameter role, used to freeze subsets during staged training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    StreamHead,
    Bilinear,
}

/// Per-head logits for one sample; heads the model lacks are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub ce: Vec<f64>,
    pub msml: Option<Vec<f64>>,
    pub fce: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Ce,
    Msml,
    Fce,
    /// Mean of the CE and FCE head probabilities.
    Fused,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Head::Ce),
            "msml" => Ok(Head::Msml),
            "fce" => Ok(Head::Fce),
            "fused" => Ok(Head::Fused),
            other => Err(Error::Parameter(format!(
                "unknown head {other:?}; expected ce, msml, fce or fused"
            ))),
        }
    }
}

/// Per-class sigmoid probabilities for each head, `N × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProbs {
    pub ce: Vec<Vec<f64>>,
    pub msml: Option<Vec<Vec<f64>>>,
    pub fce: Option<Vec<Vec<f64>>>,
}

impl HeadProbs {
    pub fn select(&self, head: Head) -> Result<Vec<Vec<f64>>> {
        let missing = |name: &str| Error::Parameter(format!("model has no {name} head"));
        match head {
            Head::Ce => Ok(self.ce.clone()),
            Head::Msml => self.msml.clone().ok_or_else(|| missing("msml")),
            Head::Fce => self.fce.clone().ok_or_else(|| missing("fce")),
            Head::Fused => {
                let fce = self.fce.clone().ok_or_else(|| missing("fce"))?;
                ensemble_fuse(&[self.ce.clone(), fce])
            }
        }
    }
}

/// Cell-wise arithmetic mean of `N × C` probability tables. Cells are summed
/// in sorted order so the result does not depend on argument order.
pub fn ensemble_fuse(score_sets: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = score_sets.first().ok_or_else(|| Error::dim("nothing to fuse"))?;
    for set in score_sets {
        if set.len() != first.len() || set.iter().zip(first).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::dim(format!(
                "cannot fuse score tables of {} and {} rows with differing widths",
                first.len(),
                set.len()
            )));
        }
    }
    let k = score_sets.len() as f64;
    let mut cell = Vec::with_capacity(score_sets.len());
    Ok((0..first.len())
        .map(|i| {
            (0..first[i].len())
                .map(|j| {
                    cell.clear();
                    cell.extend(score_sets.iter().map(|s| s[i][j]));
                    cell.sort_by(f64::total_cmp);
                    cell.iter().sum::<f64>() / k
                })
                .collect()
        })
        .collect())
}

/// One backbone with a sigmoid cross-entropy classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub backbone: Backbone,
    pub head: LinearHead,
    pub num_classes: usize,
    pub dropout: f64,
}

/// Two identically initialised backbones: stream A feeds a CE head, stream
/// B an MSML head, and both feed the bilinear FCE head.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel {
    pub stream_a: Backbone,
    pub stream_b: Backbone,
    pub head_ce: LinearHead,
    pub head_msml: LinearHead,
    pub bilinear: BilinearHead,
    pub loss_weights: LossWeights,
    pub num_classes: usize,
    pub dropout: f64,
}

/// Batched outputs of `TwoStreamModel::forward`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits_ce: Vec<Vec<f64>>,
    pub logits_msml: Vec<Vec<f64>>,
    pub logits_fce: Vec<Vec<f64>>,
    pub features_a: Vec<Tensor>,
    pub features_b: Vec<Tensor>,
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    Ok(())
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    Ok(())
}

fn flat_features(cfg: &BackboneConfig) -> Result<usize> {
    let (d, h, w) = cfg.feature_shape()?;
    Ok(d * h * w)
}

/// Splits a `[N, C, H, W]` batch into `[1, C, H, W]` samples.
pub fn split_batch(batch: &Tensor) -> Result<Vec<Tensor>> {
    if batch.rank() != 4 {
        return Err(Error::dim(format!(
            "batch must be [N, C, H, W], got {:?}",
            batch.shape()
        )));
    }
    let per = batch.len() / batch.shape()[0];
    let shape = [1, batch.shape()[1], batch.shape()[2], batch.shape()[3]];
    batch
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(shape.to_vec(), c.to_vec()))
        .collect()
}

fn probs(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| sigmoid_scalar(x)).collect()
}

impl BaselineModel {
    pub fn build(cfg: BackboneConfig, num_classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        check_classes(num_classes)?;
        check_dropout(dropout)?;
        let inputs = flat_features(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(cfg, &mut rng)?;
        let head = LinearHead::init(inputs, num_classes, &mut rng);
        Ok(BaselineModel {
            backbone,
            head,
            num_classes,
            dropout,
        })
    }

    fn sample_logits(
        &self,
        image: &Tensor,
        training: bool,
        seed: u64,
    ) -> Result<(Tensor, BackboneCache, Tensor, Vec<f64>)> {
        let (f, cache) = self.backbone.forward(image)?;
        let (dropped, logits) = self.head.forward(&f, self.dropout, training, seed::derive(seed, 1))?;
        Ok((f, cache, dropped, logits))
    }

    fn loss_and_grad(
        &self,
        image: &Tensor,
        labels: &LabelVector,
        training: bool,
        seed: u64,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let (f, cache, dropped, logits) = self.sample_logits(image, training, seed)?;
        let (ce, g) = sigmoid_bce(&Logits::new(logits)?, labels)?;
        let (d_f, d_w, d_b) = self
            .head
            .backward(&f, &dropped, &g, self.dropout, training, seed::derive(seed, 1))?;
        let mut grads = self.backbone.backward(&cache, &d_f)?;
        grads.push(d_w);
        grads.push(d_b);
        Ok((
            LossParts {
                ce,
                msml: 0.0,
                fce: 0.0,
            },
            grads,
        ))
    }

    /// `(features, logits)` for every sample of a `[N, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor, training: bool, seed: u64) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
        let mut features = Vec::new();
        let mut logits = Vec::new();
        for (i, x) in split_batch(batch)?.iter().enumerate() {
            let (f, _, _, l) = self.sample_logits(x, training, seed::derive(seed, i as u64))?;
            features.push(f);
            logits.push(l);
        }
        Ok((features, logits))
    }
}

struct TwoStreamPass {
    fa: Tensor,
    fb: Tensor,
    cache_a: BackboneCache,
    cache_b: BackboneCache,
    dropped_a: Tensor,
    dropped_b: Tensor,
    map_a: FeatureMap,
    map_b: FeatureMap,
    bilinear_cache: crate::bilinear::BilinearCache,
    logits: HeadLogitsFull,
}

struct HeadLogitsFull {
    ce: Vec<f64>,
    msml: Vec<f64>,
    fce: Vec<f64>,
}

impl TwoStreamModel {
    /// Both streams receive bit-identical initial kernels; heads are drawn
    /// afterwards from the same seeded generator.
    pub fn build(
        cfg: BackboneConfig,
        num_classes: usize,
        projection_width: usize,
        dropout: f64,
        loss_weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        check_classes(num_classes)?;
        check_dropout(dropout)?;
        loss_weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if projection_width == 0 {
            return Err(Error::Config("projection width must be positive".into()));
        }
        let (d, _, _) = cfg.feature_shape()?;
        let inputs = flat_features(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stream_a = Backbone::init(cfg, &mut rng)?;
        let stream_b = stream_a.clone();
        let head_ce = LinearHead::init(inputs, num_classes, &mut rng);
        let head_msml = LinearHead::init(inputs, num_classes, &mut rng);
        let bilinear = BilinearHead::init(d, d, projection_width, num_classes, &mut rng);
        Ok(TwoStreamModel {
            stream_a,
            stream_b,
            head_ce,
            head_msml,
            bilinear,
            loss_weights,
            num_classes,
            dropout,
        })
    }

    fn pass(&self, image: &Tensor, training: bool, seed: u64) -> Result<TwoStreamPass> {
        let (fa, cache_a) = self.stream_a.forward(image)?;
        let (fb, cache_b) = self.stream_b.forward(image)?;
        let (dropped_a, ce) = self
            .head_ce
            .forward(&fa, self.dropout, training, seed::derive(seed, 1))?;
        let (dropped_b, msml) = self
            .head_msml
            .forward(&fb, self.dropout, training, seed::derive(seed, 2))?;
        let map_shape = &fa.shape()[1..];
        let map_a = FeatureMap::new(fa.clone().reshape(map_shape)?)?;
        let map_b = FeatureMap::new(fb.clone().reshape(map_shape)?)?;
        let (fce, bilinear_cache) = self.bilinear.forward(&map_a, &map_b)?;
        Ok(TwoStreamPass {
            fa,
            fb,
            cache_a,
            cache_b,
            dropped_a,
            dropped_b,
            map_a,
            map_b,
            bilinear_cache,
            logits: HeadLogitsFull { ce, msml, fce },
        })
    }

    fn loss_and_grad(
        &self,
        image: &Tensor,
        labels: &LabelVector,
        objective: Objective,
        training: bool,
        seed: u64,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let p = self.pass(image, training, seed)?;
        let (ce, mut g_ce) = sigmoid_bce(&Logits::new(p.logits.ce.clone())?, labels)?;
        let (ms, mut g_ms) = msml(&Logits::new(p.logits.msml.clone())?, labels)?;
        let (fce, mut g_fce) = sigmoid_bce(&Logits::new(p.logits.fce.clone())?, labels)?;
        let parts = LossParts { ce, msml: ms, fce };
        let LossWeights { alpha, beta } = self.loss_weights;
        g_ce.iter_mut().chain(g_ms.iter_mut()).for_each(|g| *g *= alpha);
        g_fce.iter_mut().for_each(|g| *g *= beta);

        let zeros = |ts: Vec<&Tensor>| ts.into_iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let through_streams = objective != Objective::BilinearOnly;
        let through_bilinear = objective != Objective::Streams;

        let bil = if through_bilinear {
            Some(self.bilinear.backward(&p.map_a, &p.map_b, &p.bilinear_cache, &g_fce)?)
        } else {
            None
        };

        let mut grads = Vec::new();
        let mut head_grads = Vec::new();
        if through_streams {
            let (mut d_fa, d_cw, d_cb) = self.head_ce.backward(
                &p.fa,
                &p.dropped_a,
                &g_ce,
                self.dropout,
                training,
                seed::derive(seed, 1),
            )?;
            let (mut d_fb, d_mw, d_mb) = self.head_msml.backward(
                &p.fb,
                &p.dropped_b,
                &g_ms,
                self.dropout,
                training,
                seed::derive(seed, 2),
            )?;
            if let Some(b) = &bil {
                d_fa.add_scaled(&b.d_f1.clone().reshape(p.fa.shape())?, 1.0)?;
                d_fb.add_scaled(&b.d_f2.clone().reshape(p.fb.shape())?, 1.0)?;
            }
            grads.extend(self.stream_a.backward(&p.cache_a, &d_fa)?);
            grads.extend(self.stream_b.backward(&p.cache_b, &d_fb)?);
            head_grads = vec![d_cw, d_cb, d_mw, d_mb];
        } else {
            grads.extend(zeros(
                self.stream_a.kernels.iter().chain(&self.stream_b.kernels).collect(),
            ));
            head_grads.extend(zeros(vec![
                &self.head_ce.weight,
                &self.head_ce.bias,
                &self.head_msml.weight,
                &self.head_msml.bias,
            ]));
        }
        grads.extend(head_grads);
        match bil {
            Some(b) => grads.extend(b.d_params),
            None => grads.extend(zeros(self.bilinear.params().to_vec())),
        }
        Ok((parts, grads))
    }

    pub fn forward(&self, batch: &Tensor, training: bool, seed: u64) -> Result<ForwardOutput> {
        let mut out = ForwardOutput {
            logits_ce: Vec::new(),
            logits_msml: Vec::new(),
            logits_fce: Vec::new(),
            features_a: Vec::new(),
            features_b: Vec::new(),
        };
        for (i, x) in split_batch(batch)?.iter().enumerate() {
            let p = self.pass(x, training, seed::derive(seed, i as u64))?;
            out.logits_ce.push(p.logits.ce);
            out.logits_msml.push(p.logits.msml);
            out.logits_fce.push(p.logits.fce);
            out.features_a.push(p.fa);
            out.features_b.push(p.fb);
        }
        Ok(out)
    }
}

/// A trainable network of either architecture.
// Only a handful of models ever exist; boxing would just add indirection.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Baseline(BaselineModel),
    TwoStream(TwoStreamModel),
}

impl Model {
    pub fn num_classes(&self) -> usize {
        match self {
            Model::Baseline(m) => m.num_classes,
            Model::TwoStream(m) => m.num_classes,
        }
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        match self {
            Model::Baseline(m) => &m.backbone.config,
            Model::TwoStream(m) => &m.stream_a.config,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Model::Baseline(m) => m.dropout,
            Model::TwoStream(m) => m.dropout,
        }
    }

    /// The head whose scores represent this model in evaluation.
    pub fn primary_head(&self) -> Head {
        match self {
            Model::Baseline(_) => Head::Ce,
            Model::TwoStream(_) => Head::Fce,
        }
    }

    /// Named parameters in a fixed order shared by `params_mut` and gradients.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Model::Baseline(m) => {
                for (i, k) in m.backbone.kernels.iter().enumerate() {
                    out.push((format!("stream_a.conv{i}"), k));
                }
                out.push(("head_ce.weight".into(), &m.head.weight));
                out.push(("head_ce.bias".into(), &m.head.bias));
            }
            Model::TwoStream(m) => {
                for (i, k) in m.stream_a.kernels.iter().enumerate() {
                    out.push((format!("stream_a.conv{i}"), k));
                }
                for (i, k) in m.stream_b.kernels.iter().enumerate() {
                    out.push((format!("stream_b.conv{i}"), k));
                }
                out.push(("head_ce.weight".into(), &m.head_ce.weight));
                out.push(("head_ce.bias".into(), &m.head_ce.bias));
                out.push(("head_msml.weight".into(), &m.head_msml.weight));
                out.push(("head_msml.bias".into(), &m.head_msml.bias));
                let names = ["proj.weight", "proj.bias", "cls.weight", "cls.bias"];
                for (n, t) in names.iter().zip(m.bilinear.params()) {
                    out.push((format!("bilinear.{n}"), t));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Baseline(m) => {
                let mut v: Vec<&mut Tensor> = m.backbone.kernels.iter_mut().collect();
                v.push(&mut m.head.weight);
                v.push(&mut m.head.bias);
                v
            }
            Model::TwoStream(m) => {
                let mut v: Vec<&mut Tensor> = m.stream_a.kernels.iter_mut().collect();
                v.extend(m.stream_b.kernels.iter_mut());
                v.extend([
                    &mut m.head_ce.weight,
                    &mut m.head_ce.bias,
                    &mut m.head_msml.weight,
                    &mut m.head_msml.bias,
                ]);
                v.extend(m.bilinear.params_mut());
                v
            }
        }
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.named_params()
            .iter()
            .map(|(name, _)| {
                if name.starts_with("stream_") {
                    ParamGroup::Backbone
                } else if name.starts_with("bilinear.") {
                    ParamGroup::Bilinear
                } else {
                    ParamGroup::StreamHead
                }
            })
            .collect()
    }

    /// Which parameters a step under `objective` may update.
    pub fn trainable_mask(&self, objective: Objective) -> Vec<bool> {
        self.param_groups()
            .into_iter()
            .map(|g| match objective {
                Objective::Joint => true,
                Objective::Streams => g != ParamGroup::Bilinear,
                Objective::BilinearOnly => g == ParamGroup::Bilinear,
            })
            .collect()
    }

    /// Scalar objective value for raw loss terms.
    pub fn objective_value(&self, parts: &LossParts, objective: Objective) -> f64 {
        match self {
            Model::Baseline(_) => parts.ce,
            Model::TwoStream(m) => {
                let LossWeights { alpha, beta } = m.loss_weights;
                match objective {
                    Objective::Joint => alpha * (parts.ce + parts.msml) + beta * parts.fce,
                    Objective::Streams => alpha * (parts.ce + parts.msml),
                    Objective::BilinearOnly => beta * parts.fce,
                }
            }
        }
    }

    /// Loss terms for a `[1, C, H, W]` image and gradients of
    /// `objective_value` aligned with `params`. Parameters outside the
    /// objective receive zero gradients. A baseline model always optimises CE.
    pub fn loss_and_grad(
        &self,
        image: &Tensor,
        labels: &LabelVector,
        objective: Objective,
        training: bool,
        seed: u64,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        if labels.len() != self.num_classes() {
            return Err(Error::dim(format!(
                "{} labels for a {}-class model",
                labels.len(),
                self.num_classes()
            )));
        }
        match self {
            Model::Baseline(m) => m.loss_and_grad(image, labels, training, seed),
            Model::TwoStream(m) => m.loss_and_grad(image, labels, objective, training, seed),
        }
    }

    /// Evaluation-mode logits of every head for one `[1, C, H, W]` image.
    pub fn logits(&self, image: &Tensor) -> Result<HeadLogits> {
        match self {
            Model::Baseline(m) => {
                let (_, _, _, ce) = m.sample_logits(image, false, 0)?;
                Ok(HeadLogits {
                    ce,
                    msml: None,
                    fce: None,
                })
            }
            Model::TwoStream(m) => {
                let p = m.pass(image, false, 0)?;
                Ok(HeadLogits {
                    ce: p.logits.ce,
                    msml: Some(p.logits.msml),
                    fce: Some(p.logits.fce),
                })
            }
        }
    }

    /// Evaluation-mode loss terms for one image.
    pub fn eval_loss(&self, image: &Tensor, labels: &LabelVector) -> Result<LossParts> {
        let l = self.logits(image)?;
        let ce = sigmoid_bce(&Logits::new(l.ce)?, labels)?.0;
        let ms = match l.msml {
            Some(v) => msml(&Logits::new(v)?, labels)?.0,
            None => 0.0,
        };
        let fce = match l.fce {
            Some(v) => sigmoid_bce(&Logits::new(v)?, labels)?.0,
            None => 0.0,
        };
        Ok(LossParts { ce, msml: ms, fce })
    }

    /// Sigmoid probabilities per head for a list of `[1, C, H, W]` images.
    pub fn predict_images(&self, images: &[Tensor]) -> Result<HeadProbs> {
        use rayon::prelude::*;
        let logits: Vec<HeadLogits> = images.par_iter().map(|x| self.logits(x)).collect::<Result<_>>()?;
        let two_stream = matches!(self, Model::TwoStream(_));
        Ok(HeadProbs {
            ce: logits.iter().map(|l| probs(&l.ce)).collect(),
            msml: two_stream.then(|| {
                logits
                    .iter()
                    .map(|l| probs(l.msml.as_deref().unwrap_or_default()))
                    .collect()
            }),
            fce: two_stream.then(|| {
                logits
                    .iter()
                    .map(|l| probs(l.fce.as_deref().unwrap_or_default()))
                    .collect()
            }),
        })
    }

    /// Sigmoid probabilities per head for a `[N, C, H, W]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<HeadProbs> {
        self.predict_images(&split_batch(batch)?)
    }
}
