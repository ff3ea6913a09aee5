use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("matrix is numerically rank-deficient (sigma_min / sigma_max = {ratio:e})")]
    DegenerateMatrix { ratio: f64 },
    #[error("function is not differentiable here: {0}")]
    NonSmoothPoint(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeError(msg.into())
}
