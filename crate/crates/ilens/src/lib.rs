//! File formats, thread pools, plots and the `ilens` command line pipeline
//! on top of `ilens-core`.

pub mod config;
pub mod error;
pub mod exec;
pub mod files;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{Context, Stage, Step, StepOptions};
