//! Synthetic data, training, tracking and evaluation around the
//! multi-state tracker, plus the `mst` command line.

pub mod checkpoint;
pub mod cli;
pub mod crop;
pub mod error;
pub mod eval;
pub mod image;
pub mod optim;
pub mod scene;
pub mod track;
pub mod train;

pub use error::{HarnessError, Result};
