use std::path::PathBuf;

use regime_model::ModelError;

/// Pipeline failures, grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("config hash mismatch: {0}")]
    HashMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] regime_core::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 bad config, 3 missing artifact, 4 numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use regime_core::Error as C;
        match self {
            PipelineError::BadConfig(_) | PipelineError::HashMismatch(_) => 2,
            PipelineError::MissingArtifact(_) => 3,
            PipelineError::Numerical(_) => 4,
            PipelineError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            PipelineError::Io { .. } => 1,
            PipelineError::Core(e) => match e {
                C::InvalidConfig(_) | C::InvalidPeriod(_) | C::TooManyModes { .. } | C::TooManyClusters { .. } => 2,
                C::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                C::PeriodNotCovered(_) => 3,
                C::Degenerate(_)
                | C::DegenerateNormalization { .. }
                | C::ZeroStd(_)
                | C::UndefinedCorrelation
                | C::ZeroReferenceVariance => 4,
                _ => 1,
            },
            PipelineError::Model(e) => match e {
                ModelError::InvalidConfig(_)
                | ModelError::ChannelSchedule(_)
                | ModelError::ParameterBudget { .. }
                | ModelError::InvalidSplit(_) => 2,
                ModelError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                ModelError::NonFinite { .. } | ModelError::Diverged { .. } => 4,
                ModelError::Core(_) => 1,
                _ => 1,
            },
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
