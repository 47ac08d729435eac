//! End-to-end experiment plumbing: configuration, data preparation,
//! training and scoring, shared by the CLI and the acceptance suite.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{center_crop, generate, split, ChannelStats, GeneratorSpec, Sample, SplitIndices, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{macro_auc, ScoreMatrix};
use crate::model::{
    ensemble_fuse, train, BackboneConfig, BaselineModel, EpochRecord, Head, Model, TrainConfig, TrainStrategy,
    TwoStreamModel, DEFAULT_DROPOUT, DEFAULT_LEARNING_RATE, DEFAULT_PROJECTION_WIDTH,
};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single backbone with a sigmoid-CE head.
    Baseline,
    /// Two streams with CE, MSML and bilinear FCE heads.
    FineGrained,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelKind,
    pub backbone: BackboneConfig,
    pub projection_width: usize,
    pub dropout: f64,
    pub strategy: TrainStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            model: ModelKind::FineGrained,
            backbone: BackboneConfig::default(),
            projection_width: DEFAULT_PROJECTION_WIDTH,
            dropout: DEFAULT_DROPOUT,
            strategy: TrainStrategy::Global,
            epochs: 6,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: seed::derive(self.seed, 1),
        }
    }

    pub fn build_model(&self, num_classes: usize) -> Result<Model> {
        let init_seed = seed::derive(self.seed, 0);
        Ok(match self.model {
            ModelKind::Baseline => Model::Baseline(BaselineModel::build(
                self.backbone.clone(),
                num_classes,
                self.dropout,
                init_seed,
            )?),
            ModelKind::FineGrained => Model::TwoStream(TwoStreamModel::build(
                self.backbone.clone(),
                num_classes,
                self.projection_width,
                self.dropout,
                self.loss_weights,
                init_seed,
            )?),
        })
    }
}

/// Train/val/test folds normalised with training statistics.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: ChannelStats,
}

pub fn prepare(samples: &[Sample], indices: &SplitIndices) -> Result<PreparedData> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (mut train, mut val, mut test) = (pick(&indices.train), pick(&indices.val), pick(&indices.test));
    let stats = ChannelStats::compute(&train)?;
    for fold in [&mut train, &mut val, &mut test] {
        stats.apply_all(fold)?;
    }
    Ok(PreparedData {
        train,
        val,
        test,
        stats,
    })
}

/// Trains a fresh model described by `cfg` on prepared folds.
pub fn run(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(Model, Vec<EpochRecord>)> {
    let num_classes = data
        .train
        .first()
        .map(|s| s.labels.len())
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    let mut model = cfg.build_model(num_classes)?;
    let history = train(&mut model, &cfg.train_config(), &data.train, &data.val)?;
    Ok((model, history))
}

/// Center crops of already-normalised samples, shaped `[1, C, H, W]`.
pub fn eval_images(model: &Model, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let cfg = model.backbone_config();
    samples
        .iter()
        .map(|s| {
            let crop = center_crop(&s.image, cfg.input_height, cfg.input_width)?;
            let mut shape = vec![1];
            shape.extend_from_slice(crop.shape());
            crop.reshape(&shape)
        })
        .collect()
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("class_{c}")).collect()
}

/// Per-head probabilities on `samples`, flattened into a score matrix.
pub fn score(model: &Model, samples: &[Sample], head: Head) -> Result<ScoreMatrix> {
    let probs = model.predict_images(&eval_images(model, samples)?)?.select(head)?;
    score_matrix(probs, samples)
}

pub fn score_matrix(rows: Vec<Vec<f64>>, samples: &[Sample]) -> Result<ScoreMatrix> {
    let c = samples.first().map_or(0, |s| s.labels.len());
    let labels = samples.iter().flat_map(|s| s.labels.bits().iter().copied()).collect();
    ScoreMatrix::new(rows.concat(), labels, class_names(c))
}

/// Test macro-AUCs of one seed of the desk-scale comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub baseline: f64,
    pub global: f64,
    pub local: f64,
    pub local_fixed: f64,
    /// Baseline CE scores averaged with the Global model's FCE scores.
    pub fused: f64,
}

/// Generates the dataset for `seed`, then trains a baseline and one
/// fine-grained model per strategy under otherwise identical settings.
pub fn compare(spec: &GeneratorSpec, base: &ExperimentConfig, seed: u64) -> Result<Comparison> {
    let spec = GeneratorSpec { seed, ..spec.clone() };
    let samples = generate(&spec)?;
    let indices = split(
        &samples,
        &SplitSpec {
            seed,
            ..SplitSpec::default()
        },
    )?;
    let data = prepare(&samples, &indices)?;
    let with = |model, strategy| ExperimentConfig {
        model,
        strategy,
        seed,
        ..base.clone()
    };

    let test_auc = |m: &Model| -> Result<(f64, Vec<Vec<f64>>)> {
        let probs = m
            .predict_images(&eval_images(m, &data.test)?)?
            .select(m.primary_head())?;
        Ok((macro_auc(&score_matrix(probs.clone(), &data.test)?)?, probs))
    };
    let (baseline, _) = run(&with(ModelKind::Baseline, TrainStrategy::Global), &data)?;
    let (baseline_auc, baseline_probs) = test_auc(&baseline)?;
    let mut aucs = Vec::new();
    let mut global_probs = Vec::new();
    for strategy in [TrainStrategy::Global, TrainStrategy::Local, TrainStrategy::LocalFixed] {
        let (m, _) = run(&with(ModelKind::FineGrained, strategy), &data)?;
        let (auc, probs) = test_auc(&m)?;
        if strategy == TrainStrategy::Global {
            global_probs = probs;
        }
        aucs.push(auc);
    }
    let fused = ensemble_fuse(&[baseline_probs, global_probs])?;
    Ok(Comparison {
        seed,
        baseline: baseline_auc,
        global: aucs[0],
        local: aucs[1],
        local_fixed: aucs[2],
        fused: macro_auc(&score_matrix(fused, &data.test)?)?,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
