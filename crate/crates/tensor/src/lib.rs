//! Scalar-generic tensors with tape-based reverse-mode differentiation, the
//! layers and optimizer built on them, and a binary tensor archive.

pub mod archive;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use archive::Archive;
pub use error::{Result, TensorError};
pub use params::{BufferId, Ctx, Mode, Param, ParamId, ParamKind, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, ParamKey, Tape, Var};
pub use tensor::{numel, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
