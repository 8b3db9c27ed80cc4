use std::path::PathBuf;

/// Errors produced by the fingerprinting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid design parameters: {0}")]
    InvalidParams(String),

    #[error("{0} is not prime; only prime-order planes are supported")]
    NotPrime(u64),

    #[error("Steiner triple systems require v = 1 or 3 (mod 6) and v >= 7, got v = {0}")]
    SteinerOrder(usize),

    #[error("matrix is not a valid BIBD: {0}")]
    InvalidDesign(String),

    #[error("codebook is not {k}-resilient: two subsets share the AND-composition {composition}")]
    NotResilient { k: usize, composition: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("user index {index} out of range 1..={max}")]
    UserOutOfRange { index: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("embedding failed for user {user}: residual {residual:.3e}, worst component deviation {max_deviation:.3}, decoded {decoded:?}")]
    EmbeddingFailed {
        user: usize,
        residual: f64,
        max_deviation: f64,
        decoded: Vec<u8>,
    },

    #[error("unsupported IDX type (magic {0:#010x})")]
    IdxMagic(u32),

    #[error("malformed IDX data: {0}")]
    IdxFormat(String),

    #[error("bad weight file: {0}")]
    WeightFile(String),

    #[error("digest mismatch for {path}: registry has {expected}, file has {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("codebook exhausted: {assigned} of {capacity} code-vectors in use; expand the codebook (larger v) to add users")]
    CodebookExhausted { assigned: usize, capacity: usize },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}", path.display())]
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

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
