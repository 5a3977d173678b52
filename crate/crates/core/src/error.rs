use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below 1e-12")]
    ZeroNorm { norm: f64 },

    #[error("vector contains a non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("k = {k} exceeds the {available} available media")]
    KTooLarge { k: usize, available: usize },

    #[error("k must be at least 1")]
    ZeroK,

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("duplicate media id {media_id:?} for subject {subject_id:?}")]
    DuplicateMediaId {
        subject_id: String,
        media_id: String,
    },

    #[error("duplicate probe id {0:?}")]
    DuplicateProbeId(String),

    #[error("probe {probe_id:?} names unknown gallery subject {subject_id:?}")]
    UnknownTruthSubject {
        probe_id: String,
        subject_id: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-mated designation would select no subjects ({subjects} test subjects at fraction {fraction})")]
    InsufficientSubjects { subjects: usize, fraction: f64 },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("zero variance: {0}")]
    DegenerateVariance(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("zero standard deviation in {0}")]
    ZeroSigma(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("probe {probe_id:?}: {source}")]
    Probe {
        probe_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("subject {subject_id:?}: {source}")]
    Subject {
        subject_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_probe(self, probe_id: &str) -> Self {
        Error::Probe {
            probe_id: probe_id.to_owned(),
            source: Box::new(self),
        }
    }

    pub fn in_subject(self, subject_id: &str) -> Self {
        Error::Subject {
            subject_id: subject_id.to_owned(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping probe/subject context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Probe { source, .. } | Error::Subject { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 for input and validation failures, 3 for
    /// configuration failures.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::KTooLarge { .. }
            | Error::ZeroK
            | Error::InvalidConfig(_)
            | Error::InsufficientSubjects { .. } => 3,
            _ => 2,
        }
    }
}
