//! Saliency-guided training and open-set evaluation for iris presentation attack detection.

pub mod clustering;
pub mod datamodel;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod imageio;
pub mod nn;
pub mod reporting;
pub mod saliency;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use grid::Grid;
