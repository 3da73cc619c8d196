//! Spatio-temporal motion segmentation toolkit.

pub mod activations;
pub mod alignment;
pub mod datasets;
pub mod error;
pub mod inference;
pub mod labelspace;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod training;

pub use error::{Error, Result};
