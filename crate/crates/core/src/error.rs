use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid depth {0}: depth must be finite and strictly positive")]
    InvalidDepth(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
