//! File formats, experiment workflows and the `dragsaw` command line on top
//! of [`dragsaw_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod runner;

pub use error::{AppError, Result};
