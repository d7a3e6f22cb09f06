use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("primitive `{op}` is missing attribute `{attr}`")]
    MissingAttr { op: &'static str, attr: &'static str },

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("cross-attention requires encoder memory")]
    MissingMemory,

    #[error("rng log missing or incomplete: expected {expected} seeds, found {found}")]
    MissingRngLog { expected: usize, found: usize },

    #[error("reconstruction drift {drift:e} exceeds guard {threshold:e} at layer {layer}")]
    Drift { layer: usize, drift: f64, threshold: f64 },

    #[error("activation byte cap {cap} exceeded ({requested} requested)")]
    CapExceeded { cap: usize, requested: usize },

    #[error("unknown operation tag `{0}`")]
    UnknownTag(String),

    #[error("schema violation in `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
