//! Fixed-weight model of primate V1 as a CNN front-end.
//!
//! A Gabor filter bank whose receptive-field parameters are drawn either
//! from empirical V1 distributions or uniformly, followed by simple- and
//! complex-cell nonlinearities; a small trainable backend; corruption
//! robustness evaluation; and per-channel response analysis (activation,
//! sparseness, downstream weights and impact, cross-variant correlations).

pub mod analysis;
pub mod backend_train;
pub mod container;
pub mod corruptions;
pub mod data_pipeline;
pub mod error;
pub mod gfb;
pub mod rng;
pub mod sampling;
pub mod vone_block;

pub use error::{Error, Result};
