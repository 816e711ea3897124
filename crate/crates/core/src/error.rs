use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {id:?}: embedding not unit-norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("target row {row} is not a distribution (sum {sum})")]
    NotDistribution { row: usize, sum: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("degenerate similarity population: {0}")]
    DegeneratePopulation(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("record {0:?} has no text embedding")]
    MissingTextEmbedding(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("image-id coverage mismatch: {0:?}")]
    CoverageMismatch(Vec<String>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} ({kind}) failed: {source}")]
    Stage {
        stage: usize,
        kind: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
