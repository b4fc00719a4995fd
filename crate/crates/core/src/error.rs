use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("record {dop_id}: {reason}")]
    Record { dop_id: String, reason: String },

    #[error("{count} record(s) violate evaluation preconditions: {}", ids.join(", "))]
    Preconditions { count: usize, ids: Vec<String> },

    #[error("degenerate campaign: {0}")]
    Degenerate(String),

    #[error("duplicate dop_id `{0}`")]
    DuplicateId(String),

    #[error("malformed campaign header: {0}")]
    Header(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("{0} validation violation(s) in strict mode")]
    Strict(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn record(dop_id: &str, reason: impl Into<String>) -> Self {
        Error::Record {
            dop_id: dop_id.to_string(),
            reason: reason.into(),
        }
    }
}
