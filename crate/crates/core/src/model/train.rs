//! Mini-batch training under the three strategies.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{LossParts, Model, Objective};
use super::optim::{lr_schedule, OptimizerState, DEFAULT_LEARNING_RATE};
use crate::dataset::{center_crop, random_crop, Sample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{macro_auc, ScoreMatrix};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStrategy {
    /// Streams first with their own losses, then everything jointly.
    Local,
    /// Like `Local`, but the second stage trains only the bilinear head.
    LocalFixed,
    /// Every parameter against the joint objective from the start.
    Global,
}

impl std::str::FromStr for TrainStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(TrainStrategy::Local),
            "local-fixed" => Ok(TrainStrategy::LocalFixed),
            "global" => Ok(TrainStrategy::Global),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: TrainStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: TrainStrategy::Global,
            epochs: 6,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
        }
    }
}

/// Objective of every epoch. Staged strategies spend the first
/// `floor(2 * epochs / 3)` epochs on the stream losses.
pub fn phase_plan(strategy: TrainStrategy, epochs: usize) -> Vec<Objective> {
    let first = 2 * epochs / 3;
    (0..epochs)
        .map(|e| match strategy {
            TrainStrategy::Global => Objective::Joint,
            _ if e < first => Objective::Streams,
            TrainStrategy::Local => Objective::Joint,
            TrainStrategy::LocalFixed => Objective::BilinearOnly,
        })
        .collect()
}

/// One row of training history. Loss columns are epoch means of the
/// weighted terms `alpha * ce`, `alpha * msml` and `beta * fce`; a baseline
/// model reports its plain CE in `ce`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub msml: f64,
    pub fce: f64,
    pub val_macro_auc: Option<f64>,
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,ce,msml,fce,val_macro_auc\n");
    for r in history {
        let auc = r.val_macro_auc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{:e},{},{},{},{}", r.epoch, r.lr, r.ce, r.msml, r.fce, auc);
    }
    out
}

/// Training state that persists across epochs.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a [Sample],
    val_images: Vec<Tensor>,
    val_labels: Vec<u8>,
    num_classes: usize,
    optimizer: OptimizerState,
    plan: Vec<Objective>,
}

fn model_input(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(&shape)
}

impl<'a> Trainer<'a> {
    pub fn new(model: &Model, config: TrainConfig, train: &'a [Sample], val: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                config.learning_rate
            )));
        }
        if matches!(model, Model::Baseline(_)) && config.strategy != TrainStrategy::Global {
            return Err(Error::Config(
                "a baseline model only supports the global strategy".into(),
            ));
        }
        let cfg = model.backbone_config();
        let val_images = val
            .iter()
            .map(|s| model_input(&center_crop(&s.image, cfg.input_height, cfg.input_width)?))
            .collect::<Result<Vec<_>>>()?;
        let val_labels = val.iter().flat_map(|s| s.labels.bits().iter().copied()).collect();
        Ok(Trainer {
            plan: phase_plan(config.strategy, config.epochs),
            optimizer: OptimizerState::new(&model.params(), config.learning_rate),
            num_classes: model.num_classes(),
            config,
            train,
            val_images,
            val_labels,
        })
    }

    pub fn plan(&self) -> &[Objective] {
        &self.plan
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Runs one epoch under the objective `plan()[epoch]`.
    pub fn run_epoch(&mut self, model: &mut Model, epoch: usize) -> Result<EpochRecord> {
        let objective = *self
            .plan
            .get(epoch)
            .ok_or_else(|| Error::Parameter(format!("epoch {epoch} beyond the configured {}", self.plan.len())))?;
        self.run_epoch_with(model, epoch, objective)
    }

    /// Runs one epoch under an explicit objective.
    pub fn run_epoch_with(&mut self, model: &mut Model, epoch: usize, objective: Objective) -> Result<EpochRecord> {
        let lr = lr_schedule(self.config.learning_rate, epoch);
        self.optimizer.lr = lr;
        let epoch_seed = seed::derive(self.config.seed, 1_000 + epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let mask = model.trainable_mask(objective);
        let (crop_h, crop_w) = {
            let c = model.backbone_config();
            (c.input_height, c.input_width)
        };
        let mut totals = LossParts::default();
        for (step, batch) in order.chunks(self.config.batch_size).enumerate() {
            let frozen: &Model = model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &self.train[i];
                    let crop = random_crop(&s.image, crop_h, crop_w, true, seed::derive(epoch_seed, 2 * i as u64))?;
                    frozen.loss_and_grad(
                        &model_input(&crop)?,
                        &s.labels,
                        objective,
                        true,
                        seed::derive(epoch_seed, 2 * i as u64 + 1),
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    // Shapes and data were validated up front, so a rejected
                    // parameter here means activations overflowed to non-finite logits.
                    Error::Parameter(_) => Error::Numerical { epoch, step },
                    other => other,
                })?;

            let mut parts = LossParts::default();
            let mut iter = results.into_iter();
            let (first_parts, mut grads) = iter.next().expect("non-empty batch");
            parts.add(&first_parts);
            for (p, g) in iter {
                parts.add(&p);
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_scaled(gi, 1.0)?;
                }
            }
            if !parts.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical { epoch, step });
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale(inv));
            self.optimizer.step(&mut model.params_mut(), &grads, Some(&mask))?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical { epoch, step });
            }
            totals.add(&parts);
        }
        let mean = totals.scaled(1.0 / self.train.len() as f64);
        let (ce, msml, fce) = match model {
            Model::Baseline(_) => (mean.ce, 0.0, 0.0),
            Model::TwoStream(m) => {
                let LossWeights { alpha, beta } = m.loss_weights;
                (alpha * mean.ce, alpha * mean.msml, beta * mean.fce)
            }
        };
        let record = EpochRecord {
            epoch,
            lr,
            ce,
            msml,
            fce,
            val_macro_auc: self.validation_auc(model),
        };
        log::info!(
            "epoch {epoch} ({objective:?}, lr {lr:e}): ce {ce:.4} msml {msml:.4} fce {fce:.4} val auc {:?}",
            record.val_macro_auc
        );
        Ok(record)
    }

    fn validation_auc(&self, model: &Model) -> Option<f64> {
        let probs = model.predict_images(&self.val_images).ok()?;
        let table = probs.select(model.primary_head()).ok()?;
        let names = (0..self.num_classes).map(|c| format!("class_{c}")).collect();
        let sm = ScoreMatrix::new(table.concat(), self.val_labels.clone(), names).ok()?;
        macro_auc(&sm).ok()
    }
}

/// Trains `model` in place and returns one record per epoch.
pub fn train(model: &mut Model, config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(model, config.clone(), train, val)?;
    (0..config.epochs).map(|e| trainer.run_epoch(model, e)).collect()
}
