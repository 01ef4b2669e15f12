#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
pub mod bayes;
pub mod error;
pub mod eval;
pub mod harness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod shapegen;
pub mod training;

pub use error::{Error, Result};
