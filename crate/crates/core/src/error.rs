use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A precondition on shapes, indices or configuration was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An input fell outside the numeric domain of an operation (zero divisor, NaN, ...).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    /// Batch statistics were requested from a batch whose per-channel variance is
    /// structurally zero (a single sample feeding a dense-layer BN).
    #[error("degenerate variance at BN layer {layer}: {samples} sample(s) with rank-2 input")]
    DegenerateVariance { layer: usize, samples: usize },
    /// `backward` was called a second time on the same tape.
    #[error("backward already ran on this tape")]
    BackwardTwice,
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Contract(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
