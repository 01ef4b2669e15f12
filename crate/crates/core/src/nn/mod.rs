//! Minimal tensor layers with hand-written backward passes.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod dense;
mod grid;
mod param;

pub use activation::{clamp_backward, clamp_forward, relu_backward, relu_inplace, PRelu};
pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use batchnorm::{BatchNorm3d, BnCache};
pub use conv::{Conv3d, ConvCache};
pub use dense::{Dense, DenseCache};
pub use grid::Grid5;
pub use param::Param;
