use std::fmt;

/// Errors raised by the kernels, the pipeline and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("attention row {row} is fully masked; softmax is undefined")]
    DegenerateRow { row: usize },

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl fmt::Debug, right: impl fmt::Debug) -> Self {
        Error::Dimension {
            op,
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Strips stage labels and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for I/O, serialization and file-format failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self.root(),
            Error::Io(_) | Error::Json(_) | Error::Format { .. }
        )
    }
}

/// Attaches a stage label to an error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        })
    }
}
