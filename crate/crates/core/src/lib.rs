//! Next-day wildfire likelihood from stacked environmental rasters.
//!
//! Rasters are tiled around fire clusters, split by weekly blocks, and fed to
//! small convolutional models trained with a reverse-mode tape.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod cli;
mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod raster;
pub mod sampler;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
