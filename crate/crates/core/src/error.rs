use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (bad file, missing credential,
    /// rejected request). Never retried.
    #[error("configuration error: {0}")]
    Config(String),

    /// An invalid argument to a library operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// A draw failed terminally after `completed` of `requested` responses
    /// had been obtained.
    #[error("sampling failed after {completed}/{requested} responses: {reason}")]
    Sampling {
        completed: usize,
        requested: usize,
        reason: String,
    },

    #[error("embedding failed: {0}")]
    Embedding(String),

    /// Internal invariant violated, e.g. ragged embedding rows.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// A zero-norm row was passed to cosine distance.
    #[error("degenerate vector: row {row} of {matrix} has zero norm")]
    DegenerateVector { matrix: &'static str, row: usize },

    #[error("no neighbors for {token:?}: {reason}")]
    NeighborAcquisition { token: String, reason: String },

    /// Spearman correlation of a constant series.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures worth retrying (rate limits, server errors, network).
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
