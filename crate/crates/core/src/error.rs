use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss on client {client} (round {round}, batch {batch}): {loss}")]
    NonFinite {
        client: usize,
        round: usize,
        batch: usize,
        loss: f64,
    },

    #[error("divergence in {what}: loss {loss} exceeded {limit}")]
    Divergence {
        what: &'static str,
        loss: f64,
        limit: f64,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Configuration errors are reported before any training starts and map
    /// to a distinct process exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
