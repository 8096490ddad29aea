//! Ordinal tortuosity grading with Vision Transformers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for verification); the aliases below name the common instantiations.

pub mod ckpt;
pub mod data;
pub mod error;
pub mod level;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod vit;

pub use error::{CkptError, DataError, Error, Result};
pub use level::{Level, NUM_LEVELS};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

/// Single-precision parameters, as used for training and checkpoints.
pub type ParamSet32 = ParamSet<f32>;
/// Double-precision parameters for gradient verification.
pub type ParamSet64 = ParamSet<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ForwardTrace32 = vit::ForwardTrace<f32>;
pub type ForwardTrace64 = vit::ForwardTrace<f64>;
