//! Goal-conditioned self-attentive trajectory forecasting.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod plot;
pub mod raster;
pub mod sampling;
pub mod sar;
pub mod train;
pub mod trajectory;
pub mod unet;

pub use error::{Error, Result};
