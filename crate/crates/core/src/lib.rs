//! Multi-label softmax loss, bilinear two-stream networks and AUC-based
//! evaluation for multi-label image classification at desk scale.
//!
//! Everything runs on plain `f64` buffers with hand-written forward and
//! backward passes; randomness is always seeded and reproducible.

pub mod bilinear;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use losses::{msml, sigmoid_bce, total_loss, LabelVector, Logits, LossWeights};
pub use tensor::Tensor;
