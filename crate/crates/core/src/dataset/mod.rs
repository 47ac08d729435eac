//! Synthetic multi-label image data: generation, grouped splits,
//! normalisation, cropping and on-disk storage.

mod config;
mod generate;
mod io;
mod split;
mod transform;

pub use config::{parse_generator_spec, render_generator_spec};
pub use generate::{class_template, generate, GeneratorSpec, BACKGROUND_LEVEL, TEMPLATE_AMPLITUDE};
pub use io::{
    load, read_splits, save, write_atomic, write_splits, IMAGES_FILE, IMAGES_MAGIC, LABELS_FILE, SPLITS_FILE,
};
pub use split::{split, Fold, SplitIndices, SplitSpec};
pub use transform::{center_crop, random_crop, ChannelStats};

use crate::losses::LabelVector;
use crate::tensor::Tensor;

/// One image with its labels and the synthetic patient it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, height, width]`.
    pub image: Tensor,
    pub labels: LabelVector,
    pub group_id: u32,
}
