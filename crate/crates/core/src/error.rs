use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid tape: {0}")]
    InvalidTape(String),

    #[error("non-finite gradient for parameter `{0}`")]
    PoisonedGradient(String),

    #[error("non-finite loss term `{term}`{}", step.map(|s| format!(" in step {s}")).unwrap_or_default())]
    PoisonedLoss {
        term: String,
        step: Option<&'static str>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch of {actual} rows is too small for {what} (need at least {required})")]
    InsufficientBatch {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown domain {0}")]
    UnknownDomain(u32),

    #[error("format error at byte offset {offset}: {kind}")]
    Format { offset: u64, kind: FormatErrorKind },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    TrailingBytes,
    InvalidLabel(u8),
    InvalidTruthByte(u8),
    UnknownFlags(u32),
    Malformed(String),
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatErrorKind::BadMagic => write!(f, "bad magic"),
            FormatErrorKind::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatErrorKind::Truncated => write!(f, "truncated payload"),
            FormatErrorKind::TrailingBytes => write!(f, "length does not match header flags"),
            FormatErrorKind::InvalidLabel(b) => write!(f, "label byte {b} is not 0 or 1"),
            FormatErrorKind::InvalidTruthByte(b) => write!(f, "truth-mask byte {b} is not 0 or 1"),
            FormatErrorKind::UnknownFlags(x) => write!(f, "unknown flag bits {x:#x}"),
            FormatErrorKind::Malformed(s) => write!(f, "{s}"),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
