use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("world too crowded: could not place box {index} after {attempts} attempts")]
    WorldTooCrowded { index: usize, attempts: usize },

    #[error("no ground truth")]
    NoGroundTruth,

    #[error("modality mismatch: model expects {expected}, observation is {actual}")]
    ModalityMismatch { expected: String, actual: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("box covers no grid cell")]
    EmptyFootprint,

    #[error("ground-truth encoder did not converge: AP@0.5 {ap:.4} after {epochs} epochs")]
    NotConverged { ap: f64, epochs: usize, curve: Vec<f64> },

    #[error("frozen parameters changed: {0}")]
    FrozenViolation(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Invariant violations map to a distinct process exit code in the CLI.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::FrozenViolation(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
