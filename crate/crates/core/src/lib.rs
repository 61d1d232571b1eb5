//! Sensitivity analysis of Gaussian-process decisions to the choice of kernel.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod functional;
pub mod gp;
pub mod linalg;
pub mod spectral;
pub mod warp;
pub mod workflow;

pub use error::{Error, Result};
