//! Synthetic vibroseis deringing: shot-gather synthesis, a 9-layer
//! convolutional network trained from scratch to restore the band-limited
//! spectrum, f-K analysis and STA/LTA first-break picking.

// `!(x > 0.0)` style guards are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dsp;
pub mod error;
pub mod io;
pub mod model;
pub mod picking;
pub mod synthetics;
pub mod tensor_core;
pub mod training;

pub use error::{Error, Result};
pub use model::{build_model, ModelParams, ModelSpec, Network};
pub use synthetics::Gather;
