//! Command-line pipeline around `rlvis_core`: training, rollout collection,
//! evaluation and the three visualizations, with binary formats for weights
//! and rollouts.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use commands::run;
pub use error::{CliError, CliResult};
