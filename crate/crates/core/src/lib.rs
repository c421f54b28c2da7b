//! Multi-resolution air-quality forecasting: geospatial gridding, patch
//! assembly, the Scale-Unit ConvLSTM U-Net, training and evaluation.

pub mod config;
pub mod error;
pub mod features;
pub mod geo;
pub mod model;
pub mod time;
pub mod training;

pub use error::{Error, Result};
