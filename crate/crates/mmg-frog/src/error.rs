use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("delay {tau} fs is not an integer multiple of dt = {dt} fs")]
    NonCommensurateDelay { tau: f64, dt: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("mode under-resolved: t0 = {t0} fs needs t0 > 4*dt = {min} fs")]
    UnderResolved { t0: f64, min: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss undefined: measured spectrogram is zero under the mask")]
    UndefinedLoss,

    #[error("zeroing mask is empty")]
    EmptyMask,

    #[error("non-finite gradient encountered at iteration {iter}")]
    NonFiniteGradient { iter: usize },

    #[error("mode basis is rank deficient: {0}")]
    RankDeficient(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
