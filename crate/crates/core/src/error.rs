use std::path::PathBuf;

/// Errors raised by the data, preprocessing and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}: not a grid file")]
    BadMagic { found: String },
    #[error("unsupported format version {found:?}")]
    UnsupportedVersion { found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("empty domain")]
    EmptyDomain,
    #[error("window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("series of length {len} shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("period not covered by data: {0}")]
    PeriodNotCovered(String),
    #[error("invalid period: {0}")]
    InvalidPeriod(String),
    #[error("degenerate normalization at calendar day {day}")]
    DegenerateNormalization { day: usize },
    #[error("missing calendar-day entry {0}")]
    MissingCalendarDay(usize),
    #[error("variable mismatch: expected {expected}, found {found}")]
    VariableMismatch { expected: String, found: String },
    #[error("empty month {0}")]
    EmptyMonth(String),
    #[error("partial month {0}")]
    PartialMonth(String),
    #[error("too many modes: requested {requested}, at most {max}")]
    TooManyModes { requested: usize, max: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("k = {k} exceeds the number of points {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("empty cluster {0}")]
    EmptyCluster(usize),
    #[error("zero std for index {0}")]
    ZeroStd(String),
    #[error("negative mare {0}")]
    NegativeMare(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("undefined correlation")]
    UndefinedCorrelation,
    #[error("zero reference variance")]
    ZeroReferenceVariance,
    #[error("not enough samples: {0}")]
    InsufficientSamples(String),
    #[error("metric mismatch: {0}")]
    MetricMismatch(String),
    #[error("normalization moments absent")]
    MissingMoments,
    #[error("k mismatch: {0} vs {1}")]
    KMismatch(usize, usize),
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
