use thiserror::Error;

/// Errors raised by the filter engine and its models.
#[derive(Debug, Error)]
pub enum FilterError {
    /// A state or covariance entry became non-finite. The run must stop; no silent reset.
    #[error("estimate diverged at step {k}: state entry {entry} is {value}")]
    Divergence { k: u64, entry: usize, value: f64 },

    #[error("covariance lost positive definiteness at step {k}")]
    CovarianceNotPositiveDefinite { k: u64 },

    #[error("field grids do not match ({context}): {left} vs {right}")]
    GridMismatch {
        context: &'static str,
        left: String,
        right: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("measurement noise covariance is singular")]
    SingularNoise,

    #[error(
        "noise spectrum singular beyond the regularization floor at frequency ({f0}, {f1}): min singular value {sv:e}"
    )]
    SingularSpectrum { f0: f64, f1: f64, sv: f64 },

    #[error("invalid noise kernel: {0}")]
    InvalidKernel(String),

    #[error("camera at or below terrain: camera height {camera_z} m, terrain elevation {terrain} m")]
    CameraBelowTerrain { camera_z: f64, terrain: f64 },

    #[error("IMU samples out of order at t={t} s")]
    ImuOutOfOrder { t: f64 },

    #[error("trajectory leaves the map margin: {0}")]
    TrajectoryOutOfMap(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, FilterError>;
