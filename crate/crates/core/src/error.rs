use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, below the zero-norm threshold")]
    ZeroNormRow { row: usize, norm: f64 },
    #[error("vector norm {0:e} is below the zero-norm threshold")]
    ZeroNormVector(f64),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("objective returned a non-finite value while perturbing coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("finite-difference step {0:e} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("batch of {0} rows is too small (need at least 2)")]
    BatchTooSmall(usize),
    #[error("sample {0} was assigned itself as a negative")]
    SelfNegative(usize),
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("input has {found} columns, layer expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("tape does not belong to the current network state")]
    StaleTape,
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("truncated record {record}: {got} of {want} bytes")]
    TruncatedRecord {
        record: usize,
        got: usize,
        want: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("training diverged at step {step} (loss {loss})")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("predictor bias is zero; train the predictor first")]
    UntrainedPredictor,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
