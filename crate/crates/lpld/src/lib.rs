//! File formats, pipeline orchestration and the command-line front end for
//! label-pool dataset distillation.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod images;
pub mod parallel;
pub mod phases;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
