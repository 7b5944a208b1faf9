//! Command-line surface, persistence formats and the metrics log.

mod app;
pub mod blob;
pub mod log;
pub mod store;

use thiserror::Error;

use crate::autograd::AutogradError;
use crate::data::DataError;
use crate::networks::NetworkError;
use crate::ranking::RankingError;
use crate::selection::SelectionError;
use crate::training::TrainError;

pub use app::{main_with_args, run, Cli};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PersistError {
    #[error("io error at {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("missing file {path}")]
    Missing { path: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("unsupported format version {found} in {path}")]
    Version { path: String, found: u64 },
    #[error("integrity error at {path}: {reason}")]
    Integrity { path: String, reason: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<AutogradError> for PersistError {
    fn from(e: AutogradError) -> Self {
        PersistError::Network(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PersistError>;

/// Process exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }

    fn label(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{}: {message}", kind.label())]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    fn new(kind: ExitKind, e: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn data_kind(e: &DataError) -> ExitKind {
    match e {
        DataError::Config(_) | DataError::Usage(_) => ExitKind::Usage,
        DataError::Invalid(_) => ExitKind::Data,
        DataError::DegenerateVariance(_) => ExitKind::Numeric,
    }
}

fn network_kind(e: &NetworkError) -> ExitKind {
    match e {
        NetworkError::Config(_) => ExitKind::Usage,
        NetworkError::Dimension(_) => ExitKind::Data,
        NetworkError::Numeric(_) => ExitKind::Numeric,
    }
}

fn ranking_kind(e: &RankingError) -> ExitKind {
    match e {
        RankingError::Config(_) | RankingError::Usage(_) => ExitKind::Usage,
        RankingError::LengthMismatch(..) => ExitKind::Data,
        RankingError::Numeric(_) | RankingError::DegenerateVariance(_) => ExitKind::Numeric,
    }
}

fn train_kind(e: &TrainError) -> ExitKind {
    match e {
        TrainError::Config(_) | TrainError::Usage(_) => ExitKind::Usage,
        TrainError::Shape(_) => ExitKind::Data,
        TrainError::Numeric(_) => ExitKind::Numeric,
        TrainError::Data(e) => data_kind(e),
        TrainError::Network(e) => network_kind(e),
        TrainError::Ranking(e) => ranking_kind(e),
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        let kind = match &e {
            PersistError::Usage(_) => ExitKind::Usage,
            PersistError::Numeric(_) => ExitKind::Numeric,
            PersistError::Data(d) => data_kind(d),
            PersistError::Network(n) => network_kind(n),
            _ => ExitKind::Data,
        };
        CliError::new(kind, e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::new(data_kind(&e), e)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::new(network_kind(&e), e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::new(train_kind(&e), e)
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        let kind = match &e {
            SelectionError::Usage(_) => ExitKind::Usage,
            SelectionError::Shape(_) | SelectionError::Provenance(_) => ExitKind::Data,
            SelectionError::Numeric(_) => ExitKind::Numeric,
            SelectionError::Train(t) => train_kind(t),
        };
        CliError::new(kind, e)
    }
}
