use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown diagnosis code `{0}`")]
    UnknownCode(String),

    #[error("code index {index} out of range for vocabulary of size {size}")]
    CodeOutOfRange { index: u32, size: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("record {0} has no delivery visit")]
    MissingDelivery(String),

    #[error("corruption matrix cannot be estimated: no examples with clean label {0}")]
    EmptyClass(&'static str),

    #[error("example {0} does not carry both a clean and a noisy label")]
    MissingLabel(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{0}")]
    Metric(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("linked newborn {0} has no preterm/full-term classification")]
    UnclassifiableNewborn(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }

    pub(crate) fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
