//! Reproducible motion-correction runs: simulation, reference building,
//! correction, evaluation, L-curves and summary reports, each a subcommand
//! that exchanges only files with the others.

pub mod cli;
pub mod commands;
pub mod config;
pub mod correct;
pub mod error;
pub mod files;

pub use config::{Method, PipelineConfig};
pub use error::{PipelineError, Result};
