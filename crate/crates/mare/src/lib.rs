//! File formats, run bookkeeping and the command-line front end for the
//! multi-aspect rationale extractor in `mare-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod jsonl;
pub mod pipeline;
pub mod report;
pub mod run;

pub use error::CliError;
