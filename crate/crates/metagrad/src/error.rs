use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward target must be a scalar node, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("gradient keys do not match parameter keys: {0}")]
    KeyMismatch(String),

    #[error("non-finite loss at inner step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite loss evaluation perturbing {name}[{index}]")]
    NonFiniteEval { name: String, index: usize },

    #[error("non-finite averaged meta-gradient for {name}")]
    NonFiniteGradient { name: String },

    #[error("checkpoint {path}, line {line}: {msg}")]
    Checkpoint {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config {path}, line {line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown layer label '{0}'")]
    UnknownLayer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
