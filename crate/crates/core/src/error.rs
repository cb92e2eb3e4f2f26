use thiserror::Error;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Precondition,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not a leaf on this tape")]
    UnknownLeaf(usize),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("duplicate attribute `{0}`")]
    DuplicateAttribute(String),

    #[error(
        "edit direction for `{attribute}` is empty at lambda = {lambda}; \
         the largest relevance entry is {max_entry}, lower lambda below it"
    )]
    EmptyDirection {
        attribute: String,
        lambda: f64,
        max_entry: f64,
    },

    #[error("could not fill dataset cell {cell} after {attempts} draws")]
    GenerationBudget { cell: String, attempts: usize },

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("counterfactual search diverged after {} iterations", .trace_len)]
    SearchDiverged {
        trace_len: usize,
        trace: Vec<crate::engine::TraceStep>,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonFinite { .. }
            | Error::TrainingDiverged { .. }
            | Error::SearchDiverged { .. } => ErrorKind::Numerical,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Precondition,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn precondition(detail: impl Into<String>) -> Self {
        Error::Precondition(detail.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
