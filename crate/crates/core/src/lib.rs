//! Poisoning attacks against online-trained autoencoder anomaly detectors
//! for multivariate time series.
//!
//! The crate is organized bottom-up:
//!
//! - [`timeseries`]: series container, normalization, windows, CSV.
//! - [`signals`]: synthetic periodic signals and attack injection.
//! - [`nn`]: dense autoencoder, exact gradients and Hessian-vector products,
//!   reversible gradient-descent trainer.
//! - [`detector`]: overlapping-window wrapper, scoring and alerts.
//! - [`poisoning`]: back-gradient and interpolative poison generation.
//! - [`harness`]: experiment cells, grid search, magnitude sweeps, export.

// `!(x > 0.0)` is how configs reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod harness;
pub mod nn;
pub mod poisoning;
pub mod signals;
pub mod timeseries;

pub use error::{Error, Result};
