//! File formats, experiment directories and the `vesselnet` command line
//! on top of `vesselnet-core`.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod formats;

pub use error::{Error, Result};
