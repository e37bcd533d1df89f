use std::fmt;

/// Error kinds shared by every stage of the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("state error: {0}")]
    State(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error{}: {msg}", LineSuffix(*.line))]
    Config { line: Option<usize>, msg: String },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct LineSuffix(Option<usize>);

impl fmt::Display for LineSuffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(l) => write!(f, " at line {l}"),
            None => Ok(()),
        }
    }
}

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::Numeric(_) | Error::Degenerate(_) => ErrorClass::Numeric,
            Error::Format { .. } | Error::State(_) | Error::Missing(_) | Error::Io(_) => ErrorClass::Data,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Degenerate(_) => "degenerate-input",
            Error::Format { .. } => "format",
            Error::State(_) => "state",
            Error::Numeric(_) => "numeric",
            Error::Config { .. } => "config",
            Error::Missing(_) => "missing-input",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid;
