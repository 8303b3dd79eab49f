// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod msd;
pub mod nn;
pub mod parallel;

pub use error::{Error, Result};
pub use matrix::Matrix;
