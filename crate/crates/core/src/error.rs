use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("framing error: expected {expected} symbols, got {actual}")]
    Framing { expected: usize, actual: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("policy threshold {value} at layer {layer} is outside [0.5, 1]")]
    PolicyBounds { layer: usize, value: f64 },

    #[error("point {point:?} is not strictly below reference {reference:?}")]
    OutsideReference { point: [f64; 3], reference: [f64; 3] },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("evaluation failed after {completed} records: {source}")]
    Evaluation {
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::PolicyBounds { .. } => 2,
            _ => 3,
        }
    }
}
