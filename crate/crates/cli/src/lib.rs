//! Batch front end: config files, experiment presets and run outputs.

pub mod config;
pub mod manifest;
pub mod presets;

pub use config::{parse_config, serialize, ConfigError, Experiment, RunConfig};
pub use manifest::RunManifest;

use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{experiment}: {source}")]
    Solver {
        experiment: &'static str,
        #[source]
        source: kinetics_core::Error,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Run one preset and write its tables and manifest under `out`, or
/// under the configured output directory.
pub fn run(config: &RunConfig, out: Option<&Path>) -> Result<RunManifest, RunError> {
    config.validate()?;
    let dir = out.unwrap_or(&config.output);
    let start = Instant::now();
    let outcome = presets::execute(config).map_err(|source| RunError::Solver {
        experiment: config.experiment.name(),
        source,
    })?;
    let echo = RunConfig {
        output: dir.to_path_buf(),
        ..config.clone()
    };
    manifest::write_outputs(dir, &echo, &outcome, start.elapsed()).map_err(|source| RunError::Io {
        path: dir.display().to_string(),
        source,
    })
}
