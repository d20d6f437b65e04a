use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("query ({s}, {t}) outside grid [{s_min}, {s_max}] x [{t_min}, {t_max}]")]
    QueryOutOfBounds {
        s: f64,
        t: f64,
        s_min: f64,
        s_max: f64,
        t_min: f64,
        t_max: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid map input: {0}")]
    InvalidMap(String),
    #[error("insufficient calibration data: {got} samples, need at least {need}")]
    InsufficientCalibration { got: usize, need: usize },
    #[error("normal equations remain singular at damping {lambda:e}; problem is unobservable")]
    Unobservable { lambda: f64 },
    #[error("no overlapping timestamps between estimate and ground truth")]
    NoOverlap,
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
