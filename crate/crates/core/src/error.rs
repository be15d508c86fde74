use std::path::PathBuf;

use crate::signal::EchoComponent;
use crate::types::Vec2;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate ellipse: path length {path_length} m does not exceed focal separation {focal_separation} m")]
    DegenerateEllipse {
        path_length: f64,
        focal_separation: f64,
    },

    #[error("curves coincide; intersection set is infinite")]
    InfiniteIntersections,

    #[error("ill-conditioned intersection ({} best-effort roots)", roots.len())]
    IllConditioned { roots: Vec<Vec2> },

    #[error("echo fit diverged after {iterations} iterations")]
    FitDiverged {
        iterations: usize,
        last_valid: Vec<EchoComponent>,
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, files, arguments)
    /// rather than by a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidScene(_)
                | Error::Format(_)
                | Error::CorruptStream(_)
                | Error::Validation(_)
        )
    }
}
