use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Box3D;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("behind-camera: box corner at depth {depth:.4} is not in front of the camera")]
    BehindCamera { depth: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error("scene-too-crowded: could not place object {index} after {retries} attempts")]
    SceneTooCrowded { index: usize, retries: usize },

    #[error("empty-frustum: no scene points project inside the 2D box")]
    EmptyFrustum,

    #[error("unsatisfiable-bounds: no perturbation with IoU in [{lo}, {hi}] after {attempts} attempts for box {boxed:?}")]
    UnsatisfiableBounds {
        lo: f64,
        hi: f64,
        attempts: usize,
        boxed: Box3D,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
