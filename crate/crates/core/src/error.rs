use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("slide {0} carries no microns-per-pixel metadata and no override was given")]
    MissingMpp(PathBuf),
    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),
    #[error("invalid level index {index} (slide has {levels} levels)")]
    InvalidLevel { index: usize, levels: usize },
    #[error("empty region")]
    EmptyRegion,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("stain matrix is singular or ill-conditioned (condition number {0:.3e})")]
    SingularMatrix(f64),
    #[error("degenerate zero-area box")]
    DegenerateBox,
    #[error("could not place nucleus {index} after {attempts} attempts")]
    TooDense { index: usize, attempts: usize },
    #[error("detector backend failed on windows {windows:?}: {message}")]
    Backend { windows: Vec<u64>, message: String },
    #[error("adapter protocol violation: {message} (payload: {payload})")]
    Protocol { message: String, payload: String },
    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } | Error::Protocol { .. } => 2,
            Error::Io { .. } | Error::Tiff(_) | Error::Image(_) | Error::Csv(_) => 3,
            Error::MissingMpp(_) | Error::UnsupportedFormat(_) => 3,
            _ => 1,
        }
    }
}
