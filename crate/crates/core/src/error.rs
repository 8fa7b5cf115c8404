use std::path::PathBuf;

use pearl_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PearlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}, line {line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },
    #[error("duplicate {kind} `{id}`")]
    Duplicate { kind: &'static str, id: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pathway `{pathway}` has no genes among the measured genes")]
    MissingPathwayGenes { pathway: String },
    #[error("pathway `{pathway}` covers every measured gene")]
    DegeneratePathway { pathway: String },
    #[error("no pathway could be scored")]
    NoPathways,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),
    #[error("checkpoint parameter blob is truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },
    #[error("checkpoint parameter blob has {extra} trailing bytes")]
    CheckpointTrailing { extra: usize },
    #[error("{stage}: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PearlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PearlError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        PearlError::Parse {
            what: what.into(),
            line,
            message: message.into(),
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            PearlError::Io { .. } => "io",
            PearlError::Parse { .. } => "parse",
            PearlError::Duplicate { .. } => "duplicate",
            PearlError::InvalidValue(_) => "invalid_value",
            PearlError::Config(_) => "config",
            PearlError::MissingPathwayGenes { .. } => "missing_pathway_genes",
            PearlError::DegeneratePathway { .. } => "degenerate_pathway",
            PearlError::NoPathways => "no_pathways",
            PearlError::CheckpointVersion { .. } => "checkpoint_version",
            PearlError::CheckpointShape(_) => "checkpoint_shape",
            PearlError::CheckpointTruncated { .. } => "checkpoint_truncated",
            PearlError::CheckpointTrailing { .. } => "checkpoint_trailing",
            PearlError::NonFiniteLoss { .. } => "non_finite_loss",
            PearlError::InsufficientData(_) => "insufficient_data",
            PearlError::Autodiff(_) => "shape",
            PearlError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, PearlError>;
