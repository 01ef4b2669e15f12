//! The stochastic encoder/decoder network and its variants.
//!
//! A 3D convolutional encoder maps an image to a diagonal Gaussian over the
//! latent code; a PReLU decoder maps a latent code to a per-coordinate
//! Gaussian over the correspondence points. The variant tag selects how
//! weight uncertainty is represented: concrete-dropout gates on layer
//! inputs, rank-1 batch-ensemble fast weights, both, or neither.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use network::{
    reparameterize, reparameterize_with, DecodeCache, EncodeCache, GateDraw, LatentDist, Mode,
    Network, Normalizer, PredictiveSample, StepCache, StepOutput, LOG_VAR_MAX, LOG_VAR_MIN,
};
