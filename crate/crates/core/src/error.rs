use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside valid range {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("embedding undefined: feature response has zero norm")]
    ZeroEmbedding,

    #[error("missing trajectory cache entry for t = {0}")]
    MissingCacheEntry(usize),

    #[error("trajectory cache entry for t = {0} already written")]
    CacheEntryExists(usize),

    #[error("noise coefficient undefined at t = {t}: sigma^2 = {sigma_sq} exceeds 1 - alpha_bar = {budget}")]
    NoiseBudgetExceeded { t: usize, sigma_sq: f64, budget: f64 },

    #[error("optimizer produced a non-finite loss at step {step}")]
    OptimizerDiverged { step: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("weight file error: {0}")]
    WeightFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn ensure_finite(v: &nalgebra::DVector<f64>, context: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(context))
    }
}
