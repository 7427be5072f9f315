use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: apm_core::Error,
    },

    #[error("--{flag}: {reason}")]
    Flag { flag: &'static str, reason: String },

    #[error(transparent)]
    Core(#[from] apm_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn flag(flag: &'static str, reason: impl Into<String>) -> CliError {
    CliError::Flag {
        flag,
        reason: reason.into(),
    }
}

/// Attaches `path` to errors that do not already name a file.
pub(crate) fn at<T>(path: &Path, r: apm_core::Result<T>) -> CliResult<T> {
    use apm_core::Error as E;
    r.map_err(|e| match e {
        E::Io { .. } | E::Json { .. } | E::Bundle { .. } | E::Manifest { .. } => CliError::Core(e),
        other => CliError::File {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

impl CliError {
    /// The diagnostic on one line.
    pub fn one_line(&self) -> String {
        let mut msg = self.to_string();
        let mut src = std::error::Error::source(self);
        while let Some(s) = src {
            let part = s.to_string();
            if !msg.contains(&part) {
                msg.push_str(": ");
                msg.push_str(&part);
            }
            src = s.source();
        }
        msg.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}
