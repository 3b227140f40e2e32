use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller broke an operation's precondition.
    Contract(String),
    /// A non-finite value appeared; carries the producing operator.
    Numeric { op: &'static str },
    /// Training produced a non-finite loss at this (1-based) epoch and
    /// (0-based) batch.
    Diverged { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::Diverged { epoch, batch } => write!(f, "non-finite loss in epoch {epoch}, batch {batch}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::Error::Contract(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
