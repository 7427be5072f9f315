//! Per-run summary record.
//!
//! Every run prints exactly one JSON document to stdout:
//!
//! ```text
//! {
//!   "command":    subcommand name,
//!   "config":     every flag after defaults and APM_SEED are applied,
//!   "spec":       the resolved model spec (null where none is used),
//!   "losses":     per-iteration or per-sample losses,
//!   "prediction": {index, label, scores} or null,
//!   "outputs":    files written,
//!   "steps":      optimiser steps or iterations taken,
//!   "result":     command-specific record
//! }
//! ```
//!
//! Nothing time-dependent is recorded, so repeating an invocation repeats
//! its summary byte for byte.

use std::path::{Path, PathBuf};

use apm_core::ttt::Prediction;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub config: Value,
    pub spec: Value,
    pub losses: Vec<f64>,
    pub prediction: Option<Prediction>,
    pub outputs: Vec<PathBuf>,
    pub steps: u64,
    pub result: Value,
}

impl RunSummary {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serialises"),
            spec: Value::Null,
            losses: Vec::new(),
            prediction: None,
            outputs: Vec::new(),
            steps: 0,
            result: Value::Null,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialises")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_text(path, &(self.to_json() + "\n"))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
