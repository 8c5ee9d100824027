//! File formats, configuration, evaluation, the verification battery and
//! the `moedpo` command line on top of `moedpo-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod oracle;
pub mod verify;

pub use error::CliError;
