//! Command-line driver for the ground-station simulator.
//!
//! The binary `qgs` exposes four commands (`calibrate`, `precision`, `run`,
//! `analyze`); this library holds their implementations so tests can call
//! them in-process.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
}

impl CliError {
    /// 1 for analysis failures (no sync, no key), 2 for everything the user
    /// has to fix in the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Analysis(_) => 1,
            CliError::Config(_) | CliError::Io(_) | CliError::Format(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
