use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("insufficient frames in {path}: found {found}, requested {requested}")]
    InsufficientFrames {
        path: PathBuf,
        found: usize,
        requested: usize,
    },

    #[error("inconsistent frame dimensions: {0}")]
    InconsistentFrames(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("code {code} out of range for bank of size {size}")]
    CodeOutOfRange { code: usize, size: usize },

    #[error("empty bank")]
    EmptyBank,

    #[error("insufficient samples: {found} samples for {requested} clusters")]
    InsufficientSamples { found: usize, requested: usize },

    #[error("invalid position: {0}")]
    InvalidPosition(String),

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
