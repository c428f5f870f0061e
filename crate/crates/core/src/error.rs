use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("resolution {got} below minimum {min}")]
    Resolution { got: usize, min: usize },

    #[error("crop side {crop} exceeds image side {side}")]
    Crop { crop: usize, side: usize },

    #[error("augmentation source side {source_side} smaller than crop side {crop}")]
    Augmentation { source_side: usize, crop: usize },

    #[error("negative feature value {value} at flat index {index}")]
    Domain { index: usize, value: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("finite-difference oracle hit non-finite value at coordinate {coord}")]
    Oracle { coord: usize },

    #[error("id alignment error at row {row}: {left:?} vs {right:?}")]
    Alignment {
        row: usize,
        left: String,
        right: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
