//! File formats, training driver and command-line interface on top of
//! `docsegtr-core`.
//!
//! Formats: binary PPM images ([`ppm`]), line-delimited eval records
//! ([`records`]), dataset directories ([`dataset`]), `DSGT` checkpoints
//! ([`checkpoint`]), `key=value` run configs ([`config`]) and CSV training
//! logs ([`trainer`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ppm;
pub mod records;
pub mod trainer;

pub use error::{AppError, AppResult};
