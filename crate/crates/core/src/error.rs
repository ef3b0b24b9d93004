use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid voxel value: {0}")]
    InvalidValue(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("id conflict: {0}")]
    Conflict(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown case `{0}`")]
    UnknownCase(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("segmenter failed on transform {id}: {source}")]
    Segmenter {
        id: u32,
        #[source]
        source: Box<Error>,
    },

    /// External work (annotation or inference) has been requested but is not
    /// available yet.
    #[error("waiting on external input: {0}")]
    Pending(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
