use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core library, split by who is at fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Structural misuse: mismatched shapes, invalid specs, bad wiring.
    Config(String),
    /// Bad runtime data: out-of-range indices, empty masks.
    Data(String),
    /// API misuse: e.g. backward on an already-consumed tape.
    Usage(String),
    /// A "cannot happen" internal invariant was violated.
    Invariant(String),
    /// The requested instance is outside what the operation supports.
    Unsupported(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Data(m) => write!(f, "data error: {m}"),
            CoreError::Usage(m) => write!(f, "usage error: {m}"),
            CoreError::Invariant(m) => write!(f, "internal invariant violated: {m}"),
            CoreError::Unsupported(m) => write!(f, "unsupported instance: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::CoreError::Config(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::CoreError::Data(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, data_err};
