//! Differentiable operations, implemented as methods on [`crate::Var`].

mod attention;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use attention::attention_probs;
pub use conv::ConvGeom;
pub use norm::BatchStats;
