use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero subspace")]
    ZeroSubspace,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    // table format
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("unexpected end of data")]
    UnexpectedEof,

    #[error("row {row} has norm {norm}, expected unit norm")]
    NonUnitRow { row: usize, norm: f64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    // training
    #[error("contrastive loss undefined for a batch with a single pair")]
    SinglePairBatch,

    #[error("label {label} is not an active class for this task")]
    InactiveLabel { label: usize },

    #[error("no unmasked classes left to score")]
    NoActiveClasses,

    // metrics
    #[error("neg undefined for single class")]
    SingleClass,

    #[error("reference gap is zero")]
    ZeroReferenceGap,

    // compensation
    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("degenerate prototype (zero mean) for class {0}")]
    DegeneratePrototype(usize),

    #[error("nothing to train: every classifier column is frozen")]
    NothingToTrain,

    #[error("class-count mismatch: text head has {text}, visual head has {visual}")]
    ClassCountMismatch { text: usize, visual: usize },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_task(self, task: usize) -> Self {
        Error::Task {
            task,
            source: Box::new(self),
        }
    }
}
