use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("volume has a single intensity value; cannot normalize")]
    ConstantVolume,
    #[error("label {0} is not a body in the label volume")]
    UnknownBody(u16),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("degenerate geometry{}: {reason}", body.map(|b| format!(" for body {b}")).unwrap_or_default())]
    DegenerateGeometry { body: Option<u16>, reason: String },
    #[error("body {0} has no voxels")]
    EmptyBody(u16),
    #[error("rigid body motions collide after {attempts} attempts")]
    BodiesOverlapAfterMotion { attempts: usize },
    #[error("every voxel has a non-positive Jacobian determinant")]
    AllFolded,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn degenerate(reason: impl Into<String>) -> Self {
        Error::DegenerateGeometry {
            body: None,
            reason: reason.into(),
        }
    }

    /// Attaches a body id to a geometry error that lacks one.
    pub(crate) fn with_body(self, id: u16) -> Self {
        match self {
            Error::DegenerateGeometry { body: None, reason } => Error::DegenerateGeometry {
                body: Some(id),
                reason,
            },
            other => other,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
