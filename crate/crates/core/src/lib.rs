//! Ensemble of bidirectional Transformer sequence recommenders trained
//! jointly with masked item prediction, attribute prediction, in-batch
//! contrastive alignment and logit distillation.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use config::{Ablation, Mode, ModelConfig, TrainConfig};
pub use error::{EmkdError, Result};
