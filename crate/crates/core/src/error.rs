use std::path::PathBuf;

/// Errors produced by the editing pipeline.
///
/// Contract violations (bad shapes, out-of-range arguments) are separated from
/// format errors so callers such as the HTTP service can map them to distinct
/// status codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown predictor backend tag {0}")]
    UnknownBackend(u8),

    #[error("attention override does not match layer {layer}: expected {expected}, got {actual}")]
    OverrideShape {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("alignment index {index} out of range for {len} source tokens")]
    AlignmentOutOfRange { index: usize, len: usize },

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("invalid edit config: {0}")]
    InvalidConfig(String),

    #[error("model fingerprint {actual} does not match cache fingerprint {expected}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("codec seed {actual} does not match cache codec seed {expected}")]
    CodecMismatch { expected: u64, actual: u64 },

    #[error("attention control requested but the cache holds no attention maps")]
    MissingAttention,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("content hash mismatch")]
    HashMismatch,

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("cache build failed: {0}")]
    CacheBuild(#[source] Box<Error>),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
