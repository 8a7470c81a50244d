//! Adaptive H&E → IHC virtual staining: wavelet multi-scale features,
//! contrastively pretrained stain encoders, cross-attention fusion and a
//! patch-similarity-weighted L1 objective, with training and evaluation
//! tooling.

pub mod attention;
pub mod data;
pub mod discriminator;
pub mod encoders;
mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod trainkit;
pub mod vmfe;
pub mod wavelet;

pub use error::{Error, Result};

pub use stainfuse_tensor as tensor;

/// Single precision, used for training and inference.
pub type Tensor32 = stainfuse_tensor::Tensor<f32>;
/// Double precision, used for gradient checks and reference comparisons.
pub type Tensor64 = stainfuse_tensor::Tensor<f64>;
pub type PairedSample32 = data::PairedSample<f32>;
pub type DualEncoder32 = encoders::DualEncoder<f32>;
pub type DualEncoder64 = encoders::DualEncoder<f64>;
pub type GanTrainer32 = trainkit::GanTrainer<f32>;
pub type GanTrainer64 = trainkit::GanTrainer<f64>;
pub type Stainer32 = trainkit::Stainer<f32>;
pub type Checkpoint32 = trainkit::Checkpoint<f32>;
