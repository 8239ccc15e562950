//! File formats, dataset generation, training and evaluation drivers, and
//! the command line built on `crossmodal-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod gendata;
pub mod manifest;
pub mod off;
pub mod report;
pub mod run;

pub use error::{Error, Result};
