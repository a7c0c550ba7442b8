//! Data ingestion, Monte Carlo power studies, analysis reports and the
//! command-line interface built on `powerloss-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod powerlab;
pub mod report;

pub use error::{Error, Result};
