//! Backbones, the two-stream network, optimisation and persistence.

mod backbone;
mod checkpoint;
mod network;
mod optim;
mod train;

pub use backbone::{Backbone, BackboneCache, BackboneConfig, ConvBlock};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
};
pub use network::{
    ensemble_fuse, split_batch, BaselineModel, ForwardOutput, Head, HeadLogits, HeadProbs, LinearHead, LossParts,
    Model, Objective, ParamGroup, TwoStreamModel, DEFAULT_DROPOUT, DEFAULT_PROJECTION_WIDTH,
};
pub use optim::{lr_schedule, OptimizerState, DEFAULT_LEARNING_RATE};
pub use train::{history_to_csv, phase_plan, train, EpochRecord, TrainConfig, TrainStrategy, Trainer};
