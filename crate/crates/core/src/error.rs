use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("trigger placement: {0}")]
    Placement(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("codec {codec} ({params}): {detail}")]
    Codec {
        codec: String,
        params: String,
        detail: String,
    },

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("manifest validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
