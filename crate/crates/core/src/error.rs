use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Input outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Unknown condition or class identifier.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// A loss, gradient or state became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
