//! File formats, run configuration, reporting and the command-line surface
//! for `svgan-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod log;
pub mod report;

pub use error::{Error, Result};
