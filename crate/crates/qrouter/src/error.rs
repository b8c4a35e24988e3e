use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dressed-state labeling collision: {0}")]
    LabelCollision(String),
    #[error("fit did not converge: {0}")]
    FitNonConvergence(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("channel compilation refused: {0}")]
    Channel(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("tomography error: {0}")]
    Tomography(String),
    #[error("qram error: {0}")]
    Qram(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
