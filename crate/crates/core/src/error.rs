use thiserror::Error;

/// Errors produced by model validation, simulation, normalization, and detection.
#[derive(Debug, Error)]
pub enum Error {
    #[error("step index {index} out of range (horizon {horizon})")]
    IndexOutOfRange { index: usize, horizon: usize },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("matrix is not symmetric positive definite: {context}")]
    NotPositiveDefinite { context: String },

    #[error("conditioning failure: {context}")]
    Conditioning { context: String },

    #[error("no watermark delay kappa <= {kappa_max} makes the watermark visible in the output (watermark unobservable)")]
    WatermarkUnobservable { kappa_max: usize },

    #[error("replay source exhausted at step {step}")]
    ReplayExhausted { step: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("system fingerprint mismatch: tables were built for {expected}, scenario is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("invalid configuration: {context}")]
    InvalidConfig { context: String },

    #[error("unsupported file format: {context}")]
    Format { context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>) -> Self {
        Error::DimensionMismatch { context: context.into() }
    }

    pub(crate) fn conditioning(context: impl Into<String>) -> Self {
        Error::Conditioning { context: context.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
