//! Multi-decoder feature-grid scene representation networks (MDSRN) for
//! scalar volumes, with ensemble variance estimation, variance-error
//! regularization (RMDSRN), the usual uncertainty baselines, evaluation
//! metrics and a statistical direct volume renderer.

pub mod checkpoint;
pub mod encoders;
mod error;
pub mod grid;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod render;
pub mod volume;

pub use error::{Error, Result};
