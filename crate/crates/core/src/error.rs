use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error("malformed events table at line {line}: {msg}")]
    EventsParse { line: usize, msg: String },

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("stimulus {0} has no cross-modal counterpart")]
    MissingPair(String),

    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid HRF parameters: {0}")]
    InvalidParams(String),

    #[error("event {stimulus_id} (run {session}/{run}) lies outside the scanned window")]
    EventOutOfRange {
        stimulus_id: String,
        session: u32,
        run: u32,
    },

    #[error("design matrix has no event regressors")]
    EmptyDesign,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("too few rows ({rows}) for {folds} folds")]
    TooFewRows { rows: usize, folds: usize },

    #[error("no target features for stimulus {0}")]
    MissingTarget(String),

    #[error("zero-norm vector in cosine distance")]
    ZeroVector,

    #[error("unknown ROI {0:?}")]
    UnknownRoi(String),

    #[error("ROI {0} matched no voxels")]
    EmptyMask(String),

    #[error("voxel {0} is not present in the beta matrix")]
    UnknownVoxel(u32),

    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),

    #[error("features do not come from this synthetic run: {0}")]
    MismatchedProvenance(String),

    #[error("feature matrices are not aligned: {0}")]
    AlignmentMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
