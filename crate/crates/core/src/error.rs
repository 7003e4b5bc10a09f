use std::path::PathBuf;

/// Errors produced by the reconstruction and matching pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("behind camera: point depth {0} is not positive")]
    BehindCamera(f64),
    #[error("plane through camera center")]
    PlaneThroughCameraCenter,
    #[error("polyp overlap: polyps {0} and {1} have intersecting supports")]
    PolypOverlap(usize, usize),
    #[error("camera not in lumen: pose {0}")]
    CameraNotInLumen(usize),
    #[error("patch too sparse: patch {id} has {points} points (minimum 50)")]
    PatchTooSparse { id: usize, points: usize },
    #[error("insufficient views: {0} (need at least 2)")]
    InsufficientViews(usize),
    #[error("degenerate point set: all points coincide")]
    DegeneratePointSet,
    #[error("empty point set")]
    EmptyPointSet,
    #[error("no correspondence mass")]
    NoCorrespondenceMass,
    #[error("no candidates to match")]
    NoCandidates,
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of a numerical procedure on otherwise well-formed input.
    pub fn is_numeric(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_numeric();
        }
        matches!(
            self,
            Error::BehindCamera(_)
                | Error::PlaneThroughCameraCenter
                | Error::DegeneratePointSet
                | Error::NoCorrespondenceMass
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
