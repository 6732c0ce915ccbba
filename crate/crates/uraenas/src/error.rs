use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up; carries the offending axes.
    Dimension(String),
    /// Bad argument to an operation (label out of range, empty subset, ...).
    Input(String),
    /// A documented invariant was violated (simplex drift, etc.).
    Invariant(String),
    /// Misconfigured run (missing edge parameters, snapshot shortfall, ...).
    Config(String),
    /// Training diverged or produced non-finite values.
    Training(String),
    /// File format problem (dataset blobs, checkpoints).
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Invariant(m) => write!(f, "invariant violation: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
