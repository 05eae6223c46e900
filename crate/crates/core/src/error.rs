use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: non-finite value produced by {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rank {rank} invalid for a {d_out}x{d_in} site (need 1 <= r < min(d_out, d_in))")]
    Rank { rank: usize, d_out: usize, d_in: usize },

    #[error("routing error: language {0:?} is not in the bank")]
    Routing(String),

    #[error("conflict: language {0:?} already present")]
    Conflict(String),

    #[error("checksum mismatch in {lang:?}{}", site.as_ref().map(|s| format!(" at site {s}")).unwrap_or_default())]
    Checksum { lang: String, site: Option<String> },

    #[error("base fingerprint mismatch: file expects {expected}, loaded base is {actual}")]
    Fingerprint { expected: String, actual: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("degenerate probability mass: base languages received zero total probability")]
    DegenerateMass,

    #[error("sampling error: requested {requested} segments from a corpus of {available}")]
    Sampling { requested: usize, available: usize },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
