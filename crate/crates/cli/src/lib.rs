//! Batch pipeline around the `graphbert` library: ingestion, caching,
//! pre-training, fine-tuning, clustering, sweeps and reports.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod run;

pub use error::{CliError, Result};
