use thiserror::Error;

/// Errors produced by the estimation, spectral, and simulation routines.
#[derive(Debug, Error)]
pub enum FopcaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("singularity error: {0}")]
    Singularity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("pole error: f evaluated at a pole, x = {0}")]
    Pole(f64),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("weak instrument: |gamma_hat| = {gamma_hat:.3e} below tolerance (first-stage t = {first_stage_t:.3})")]
    WeakInstrument { gamma_hat: f64, first_stage_t: f64 },

    #[error("requires synthetic data: {0}")]
    RequiresSynthetic(String),

    #[error("degrees-of-freedom error: {0}")]
    DegreesOfFreedom(String),

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FopcaError>;
