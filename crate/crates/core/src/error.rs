use alloc::string::String;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("spatial dims {d}x{h}x{w} are not multiples of {granularity}")]
    Granularity {
        d: usize,
        h: usize,
        w: usize,
        granularity: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("unexpected weight `{0}`")]
    UnexpectedWeight(String),
    #[error("invalid label value {0}")]
    InvalidLabel(u8),
    #[error("empty brain mask")]
    EmptyBrainMask,
    #[error("zero standard deviation over brain voxels in channel {0}")]
    ZeroStd(usize),
    #[error("undefined distance: {0} mask is empty")]
    UndefinedDistance(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn mismatch(axis: impl Into<String>, expected: usize, actual: usize) -> Error {
    Error::ShapeMismatch {
        axis: axis.into(),
        expected,
        actual,
    }
}

pub(crate) fn ensure_eq(axis: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(mismatch(axis, expected, actual))
    }
}
