use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::args::Command;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run.json";
pub const SEED_ENV: &str = "STRM_SEED";

/// Everything needed to reproduce one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// The command with every default filled in and overrides applied.
    pub command: Command,
    /// Library-level configurations derived from the command.
    pub resolved: serde_json::Value,
    pub seed: Option<u64>,
    /// Set when the seed came from the environment.
    pub seed_from_env: bool,
    pub timestamp: String,
    pub outputs: Vec<PathBuf>,
}

/// UTC time of the run, or `SOURCE_DATE_EPOCH` when set, so that runs can
/// be made byte-reproducible.
pub fn timestamp() -> String {
    let time = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    time.to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: Command, resolved: serde_json::Value, seed_from_env: bool, outputs: Vec<PathBuf>) -> Self {
        let mut command = command;
        let seed = command.seed_mut().map(|s| *s);
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            resolved,
            seed,
            seed_from_env,
            timestamp: timestamp(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
