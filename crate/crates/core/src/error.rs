use std::path::PathBuf;

/// Errors produced by the deformation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing required property `{0}`")]
    MissingProperty(String),
    #[error("invalid value in record {index}: {message}")]
    Data { index: usize, message: String },
    #[error("scene contains no splats")]
    EmptyScene,
    #[error("scene bounding box is degenerate (extent {0})")]
    DegenerateScene(f64),
    #[error("occupancy region of splat {0} is empty")]
    EmptyRegion(usize),
    #[error("neighborhood of point {center} has {found} neighbors, at least 3 are required")]
    NeighborhoodTooSmall { center: usize, found: usize },
    #[error("triangle is degenerate (area {0:e})")]
    DegenerateTriangle(f64),
    #[error("invalid handle specification at `{field}`: {message}")]
    Handle { field: String, message: String },
    #[error("linear system for component {component} is singular: {message}")]
    Singular { component: usize, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("operation cancelled")]
    Cancelled,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(index: usize, message: impl Into<String>) -> Self {
        Error::Data {
            index,
            message: message.into(),
        }
    }

    pub(crate) fn handle(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Handle {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
