use std::path::PathBuf;

use thiserror::Error;

use crate::cal::Decision;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence of length {len} exceeds max width {max_width}")]
    SequenceOverflow { len: usize, max_width: usize },

    #[error("invalid nucleotide {0:?} (expected one of A, C, T, G, N)")]
    InvalidBase(char),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 8],
        found: Vec<u8>,
    },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated payload: needed {needed} more bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("dataset is empty after filtering classes with fewer than {min_per_class} samples")]
    EmptyDataset { min_per_class: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no prototype assigned to it")]
    NoOwnClassPrototype(usize),

    #[error("prototype {0} has zero norm")]
    ZeroNormPrototype(usize),

    #[error("similarity {value} at index {index} lies outside [0, 1]")]
    SimilarityOutOfRange { index: usize, value: f64 },

    #[error("no candidate patches available for projection")]
    NoCandidatePatches,

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("non-finite loss during {stage} at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("sample {0} appears in both the training and calibration splits")]
    SplitOverlap(u64),

    #[error("genetic measurement required for sample {}", .0.sample_id)]
    MeasurementRequired(Box<Decision>),

    #[error("genetic measurement required for sample {sample_id} at tree node {node}")]
    GeneticRequired { sample_id: u64, node: usize },

    #[error("tree topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
