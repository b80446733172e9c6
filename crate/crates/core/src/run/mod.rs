//! Run configuration and the pipeline commands behind the CLI.

mod commands;
mod config;

pub use commands::*;
pub use config::{DataSection, DetectorSection, EvalSection, HsrSection, PathsSection, RunConfig, RunDir};
