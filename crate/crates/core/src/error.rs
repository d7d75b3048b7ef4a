use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("point ({u:.3}, {v:.3}) lies outside the {width} x {height} mm sheet")]
    OutsideDomain { u: f64, v: f64, width: f64, height: f64 },

    #[error("meshing failed: {0}")]
    Meshing(String),

    #[error("conductivity must be positive, found {value} at recon point {index}")]
    NonPositiveConductivity { index: usize, value: f64 },

    #[error("provenance mismatch: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("reference voltage is zero at measurement {index}")]
    ZeroReference { index: usize },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("iteration diverged at step {iteration}")]
    Diverged { iteration: usize },

    #[error("noise variance collapsed to {0}")]
    NoiseCollapse(f64),

    #[error("point cloud: {0}")]
    Cloud(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: String },

    #[error("training: {0}")]
    Training(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
