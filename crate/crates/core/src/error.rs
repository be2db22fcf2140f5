use std::path::PathBuf;

use crate::masking::Task;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward called twice on the same tape")]
    TapeReused,

    #[error("no supervised positions")]
    NoSupervisedPositions,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("nothing to mask")]
    NothingToMask,

    #[error("masking for task {task} failed: {source}")]
    TaskMasking {
        task: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty generation for pid {0}")]
    EmptyGeneration(String),

    #[error("unknown pids: {0:?}")]
    UnknownPids(Vec<String>),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("task {0} is not enabled in this model")]
    TaskDisabled(Task),

    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("empty passage pool")]
    EmptyPool,

    #[error("empty query")]
    EmptyQuery,

    #[error("no training pairs")]
    NoPairs,

    #[error("no judged queries in run")]
    NoJudgedQueries,

    #[error("index fingerprint {index} does not match model fingerprint {model}")]
    FingerprintMismatch { index: String, model: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}", path = path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn in_stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// Stable machine-readable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::DimMismatch { .. } | Error::TooLong { .. } => "E_SHAPE",
            Error::TapeReused => "E_TAPE",
            Error::NoSupervisedPositions | Error::NothingToMask | Error::TaskMasking { .. } => {
                "E_MASK"
            }
            Error::EmptyCorpus | Error::NoPairs | Error::EmptyPool => "E_EMPTY",
            Error::EmptyGeneration(_) | Error::UnknownPids(_) | Error::Parse { .. } => "E_INPUT",
            Error::TaskDisabled(_) => "E_TASK",
            Error::EmptyCandidates | Error::EmptyQuery => "E_CANDIDATES",
            Error::NoJudgedQueries => "E_EVAL",
            Error::FingerprintMismatch { .. } => "E_FINGERPRINT",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Config(_) | Error::UnknownVariant(_) => "E_CONFIG",
            Error::Stage { source, .. } => source.code(),
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
