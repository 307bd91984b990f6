use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate feature: norm {norm:e} is too small to normalize")]
    DegenerateFeature { norm: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("model has no classes")]
    EmptyModel,

    #[error("non-finite value in {term}")]
    Numerical { term: &'static str },

    #[error("class {0} from the previous session is missing from the current model")]
    ModelRegression(u32),

    #[error("merged component has a degenerate mean (antipodal cancellation)")]
    DegenerateMerge,

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("purity unavailable: example {0} has no domain label")]
    PurityUnavailable(u64),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
