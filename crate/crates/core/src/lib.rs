//! Remote photoplethysmography with decomposition/reconstruction training.
//!
//! The crate turns per-ROI colour traces into spatial-temporal maps, trains a
//! spatial-attention estimator on real and cross-generated pseudo maps, and
//! estimates heart rate from the predicted pulse waveform. A synthetic
//! generator with known signal/noise decomposition stands in for recorded
//! datasets.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod models;
pub mod patch_crop;
pub mod roi;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
