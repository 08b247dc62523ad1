//! Shared-backbone audio-visual self-supervised pretraining for speaker
//! verification: a single transformer encodes both face images and
//! spectrograms, trained with a contrastive term across modalities plus
//! masked reconstruction through a joint encoder/decoder.

pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod patchio;
pub mod selfcheck;
pub mod trainer;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Checkpoint, ModelConfig, ModelState};
