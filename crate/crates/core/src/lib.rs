pub mod banded;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod patch;
pub mod predictor;
pub mod ssvm;
pub mod train;

pub use error::{Error, Result};
