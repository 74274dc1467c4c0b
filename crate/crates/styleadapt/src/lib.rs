//! File formats, checkpoints, run configuration and the staged pipeline
//! behind the `styleadapt` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::Paths;
