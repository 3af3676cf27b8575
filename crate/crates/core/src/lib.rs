//! Token-gated transformer encoder with learned mask matching, polarization
//! regularizers and an analytic FLOPs model.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gate;
pub mod gradcheck;
pub mod harness;
pub mod regularizers;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use config::{AttentionExclusion, FilterTargetMode, ModelConfig};
pub use encoder::Model;
pub use error::{Error, Result};
pub use tensor::Tensor;
