use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid factor graph: {0}")]
    InvalidGraph(String),
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error(
        "codeword index {index} out of range for block {block}, user {user} (M_mod = {m_mod})"
    )]
    IndexOutOfRange {
        block: usize,
        user: usize,
        index: usize,
        m_mod: usize,
    },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("singular system matrix (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },
    #[error("enumeration of {0} superimposed codewords is too large")]
    EnumerationTooLarge(u128),
    #[error("invalid user graph: {0}")]
    InvalidUserGraph(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
