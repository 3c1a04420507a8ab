//! File formats, run directories, reports and the command line around
//! `simdis-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config_file;
pub mod dataset_io;
pub mod error;
pub mod report;
pub mod rundir;

pub use error::{LabError, Result};
