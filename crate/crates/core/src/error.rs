use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid codebook: {0}")]
    Codebook(String),
    #[error("code index {index} out of range for K={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("invalid data spec: {0}")]
    DataSpec(String),
    #[error("enumeration guard exceeded: K^G = {cells} > {limit}")]
    EnumerationGuard { cells: u128, limit: usize },
    #[error("time {t} outside [0, {max}]")]
    TimeGuard { t: f64, max: f64 },
    #[error("temperature {tau} below minimum {min}")]
    Temperature { tau: f64, min: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("distribution not normalized: {0}")]
    Normalization(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("method mismatch: expected {expected}, found {found}")]
    MethodMismatch { expected: String, found: String },
    #[error("guidance: {0}")]
    Guidance(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset file: {0}")]
    Dataset(String),
    #[error("numerical abort at iteration {iteration}: {detail}")]
    NumericalAbort { iteration: u64, detail: String },
    #[error("sampler diverged at step {step}: {detail}")]
    SamplerDiverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
