use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    Shape { op: &'static str, detail: String },
    /// An argument is outside the operation's domain.
    InvalidArgument { op: &'static str, detail: String },
    /// Training produced a NaN or infinite loss.
    NonFiniteLoss { iteration: usize, value: f64 },
    /// No videos (or no usable frame pairs) to draw from.
    EmptyDataset,
    /// A backward pass was handed a cache that does not belong to these parameters.
    StaleCache(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::NonFiniteLoss { iteration, value } => {
                write!(f, "non-finite loss {value} at iteration {iteration}")
            }
            Error::EmptyDataset => f.write_str("dataset has no usable frame pairs"),
            Error::StaleCache(why) => write!(f, "stale forward cache: {why}"),
        }
    }
}

impl core::error::Error for Error {}
