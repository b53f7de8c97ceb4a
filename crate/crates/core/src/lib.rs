//! Anomaly detection on noisy digit images by weighting VAE reconstruction
//! error with a gradient-weighted class-activation region of interest.

pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod raster;
pub mod saliency;

pub use error::{Error, Result};
