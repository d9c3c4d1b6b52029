//! Experiment driver: scenario files, artifact formats and the
//! simulate → estimate → query → benchmark pipeline behind the `stgp` binary.

pub mod config;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod posterior_file;

pub use config::ConfigFile;
pub use error::CliError;
