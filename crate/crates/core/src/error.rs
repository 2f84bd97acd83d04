use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Solver,
    Simulation,
    Analysis,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} outside the valid window [{min}, {max}] {unit}")]
    Range {
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
        unit: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no root of {what} in [{lo}, {hi}] {unit} (bracket scan: Δk from {f_lo:.4e} to {f_hi:.4e} rad/m, no sign change)")]
    NoRoot {
        what: &'static str,
        lo: f64,
        hi: f64,
        unit: &'static str,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("photon-number calibration infeasible: g2 = {g2} with brightness {brightness} (feasible: 0 <= g2 <= {max_g2:.6})")]
    Calibration { brightness: f64, g2: f64, max_g2: f64 },

    #[error("division by zero: {0}")]
    Division(&'static str),

    #[error("half-level crossing not found on the {side} side of the peak")]
    Bracket { side: &'static str },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("stream not sorted at index {index}: {timestamp} ps after {previous} ps")]
    Unsorted { index: usize, timestamp: u64, previous: u64 },

    #[error("singular normal equations (rank-deficient Jacobian, column {column})")]
    RankDeficient { column: usize },

    #[error("bad tag file format: {0}")]
    Format(String),

    #[error("tag file corrupted at byte offset {offset}: {reason}")]
    Corruption { offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::Config(_) => ErrorKind::Config,
            Error::Range { .. }
            | Error::Domain(_)
            | Error::NoRoot { .. }
            | Error::Bracket { .. }
            | Error::RankDeficient { .. }
            | Error::Calibration { .. } => ErrorKind::Solver,
            Error::Io { .. } | Error::Stream(_) | Error::Json(_) => ErrorKind::Simulation,
            Error::Format(_)
            | Error::Corruption { .. }
            | Error::Unsorted { .. }
            | Error::Division(_)
            | Error::Invalid(_) => ErrorKind::Analysis,
        }
    }

    /// Tags a failure with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
