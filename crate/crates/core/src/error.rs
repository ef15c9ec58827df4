use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate map: {0}")]
    DegenerateMap(String),
    #[error("degenerate mask for subject token {subject}: {reason}")]
    DegenerateMask { subject: usize, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Failures while reading or writing SCAT trace files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"SCAT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("count mismatch at byte {offset}: {what}")]
    CountMismatch { offset: usize, what: String },
    #[error("invalid metadata at byte {offset}: {reason}")]
    Metadata { offset: usize, reason: String },
    #[error("inconsistent records: {0}")]
    Inconsistent(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
