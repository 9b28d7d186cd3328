use std::fmt;
use std::path::Path;

use kpiforge::forest::ForestError;
use kpiforge::importance::ImportanceError;
use kpiforge::kpi::KpiError;
use kpiforge::monitor::MonitorError;
use kpiforge::synth::SynthError;
use kpiforge::tabular::TableError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const REFRESH: i32 = 3;
    pub const DATA: i32 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, configuration, registry state or review action.
    Usage,
    /// Unreadable or invalid data, schema mismatch, model/report files.
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => exit::USAGE,
            ErrorKind::Data => exit::DATA,
        }
    }

    /// `error kind=<usage|data> code=<n>: <message>` on a single line.
    pub fn line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
        };
        let message = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error kind={kind} code={}: {message}", self.exit_code())
    }

    pub fn in_file(path: &Path, err: impl fmt::Display) -> Self {
        Self::data(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::InvalidParams(_) | ForestError::ThreadPool(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ImportanceError> for CliError {
    fn from(e: ImportanceError) -> Self {
        match e {
            ImportanceError::Forest(f) => f.into(),
            ImportanceError::RepeatsZero
            | ImportanceError::TooFewSeeds(_)
            | ImportanceError::SeedCollision(_)
            | ImportanceError::InvalidTopK
            | ImportanceError::MissingHoldout => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<KpiError> for CliError {
    fn from(e: KpiError) -> Self {
        match e {
            KpiError::Io { .. } | KpiError::Format(_) | KpiError::Corrupt | KpiError::FeatureSetMismatch => {
                Self::data(e.to_string())
            }
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<MonitorError> for CliError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::InvalidTopK { .. } | MonitorError::InvalidThreshold(_) | MonitorError::InvalidResampling => {
                Self::config(e.to_string())
            }
            MonitorError::Importance(i) => i.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::config(e.to_string())
    }
}
