use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by graph construction, sliced execution, and pruning.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer dimensions do not line up. `at` names the offending
    /// site (layer, block, or operation).
    Dimension { at: String, detail: String },
    /// A numeric invariant was violated (non-finite value, non-positive
    /// variance, ...).
    Numeric { at: String, detail: String },
    /// An index (width index, BN bank, channel, label) is out of range.
    IndexOutOfRange { at: String, index: usize, limit: usize },
    /// A per-channel vector has the wrong length.
    LengthMismatch { at: String, expected: usize, got: usize },
    /// Requested model name is not in the zoo.
    UnknownModel(String),
    /// A FLOPs target below the minimum achievable (all layers at the
    /// one-channel floor).
    UnreachableTarget { target: u64, minimum: u64 },
    /// An operation was invoked on a configuration it does not support.
    Unsupported { at: String, detail: String },
    /// Invalid argument or configuration value.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { at, detail } => write!(f, "dimension error at {at}: {detail}"),
            Error::Numeric { at, detail } => write!(f, "numeric error at {at}: {detail}"),
            Error::IndexOutOfRange { at, index, limit } => {
                write!(f, "index {index} out of range at {at} (limit {limit})")
            }
            Error::LengthMismatch { at, expected, got } => {
                write!(f, "length mismatch at {at}: expected {expected}, got {got}")
            }
            Error::UnknownModel(name) => write!(f, "unknown model '{name}'"),
            Error::UnreachableTarget { target, minimum } => write!(
                f,
                "FLOPs target {target} below minimum achievable {minimum}"
            ),
            Error::Unsupported { at, detail } => write!(f, "unsupported at {at}: {detail}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for Error {}
