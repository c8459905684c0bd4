//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffAeError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate latent: dimension {dim} has zero variance")]
    DegenerateLatent { dim: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("rejection sampling starved: acceptance rate {rate:.2e} below 1e-4 after {attempts} attempts")]
    SamplerStarved { rate: f64, attempts: usize },

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiffAeError>;
