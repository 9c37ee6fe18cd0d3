use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("channel schedule must end at 1, got {0:?}")]
    ChannelSchedule(Vec<usize>),
    #[error("parameter count {count} outside [{lo}, {hi}]")]
    ParameterBudget { count: usize, lo: usize, hi: usize },
    #[error("month {0} outside 1..=12")]
    MonthOutOfRange(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("non-finite values after layer {layer}")]
    NonFinite { layer: String },
    #[error("seed {seed} diverged at epoch {epoch}: {reason}")]
    Diverged { seed: usize, epoch: usize, reason: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("config mismatch between ensemble members")]
    ConfigMismatch,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Core(#[from] regime_core::Error),
}

impl ModelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
