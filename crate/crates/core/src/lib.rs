//! Constellation-image denoising masked autoencoder: data synthesis,
//! model, training and evaluation.

pub mod ablate;
pub mod config;
pub mod constellation;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sigsynth;
pub mod train;

pub use cmae_tensor as tensor;
pub use error::{Error, Result};
