//! File formats, experiment configuration, and the command-line pipeline
//! around `msae-core`.
//!
//! Everything here is deliberately deterministic: output files carry no
//! timestamps, all randomness derives from the one experiment seed, and
//! thread-count changes never alter bytes. Re-running a command with
//! unchanged inputs overwrites outputs with identical content.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod par;
pub mod provenance;

pub use config::ExperimentConfig;
pub use error::CliError;
