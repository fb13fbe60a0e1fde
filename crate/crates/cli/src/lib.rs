//! Experiment pipelines: dataset generation, training runs, depth sweeps,
//! signal-decay analysis, parameter counts and result tables.

pub mod cli;
pub mod decay;
pub mod error;
pub mod generate;
mod io;
pub mod lists;
pub mod params;
pub mod report;
pub mod results;
pub mod runs;
pub mod spec;

pub use error::{CliError, Result};
