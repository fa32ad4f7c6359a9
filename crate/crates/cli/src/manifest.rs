use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use unicorn_core::gridio::write_atomic;

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command invocation. `config` holds the settings needed to
/// rerun it; artifact paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config,
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        }
    }

    pub fn write(&mut self, path: &Path, elapsed: Duration) -> Result<(), CliError> {
        self.duration_secs = elapsed.as_secs_f64();
        self.artifacts.sort();
        write_atomic(path, &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
