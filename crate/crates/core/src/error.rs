use std::path::PathBuf;

use thiserror::Error;

use crate::simulate::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Report produced when the time-domain integration leaves the finite range.
#[derive(Debug, Clone)]
pub struct Divergence {
    /// Last simulated time at which the state was finite and inside the guard.
    pub last_finite_time: f64,
    /// Everything recorded up to `last_finite_time`.
    pub partial: Trajectory,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid cutter geometry: radial depth {radial_depth_mm} mm exceeds tool diameter {diameter_mm} mm")]
    InvalidGeometry {
        radial_depth_mm: f64,
        diameter_mm: f64,
    },

    #[error("integration step {step:e} s does not resolve delay {delay:e} s (need step <= delay/100)")]
    DelayUnderResolved { step: f64, delay: f64 },

    #[error("simulation diverged after t = {:.6} s", .0.last_finite_time)]
    Diverged(Box<Divergence>),

    #[error("numerical failure in interval {interval}: {what}")]
    Numerical { interval: usize, what: String },

    #[error("{failed} of {total} grid points failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("unidentifiable window: {0}")]
    Unidentifiable(String),

    #[error("sensor window invalid: {0}")]
    InvalidWindow(String),

    #[error("query out of range: {0}")]
    OutOfRange(String),

    #[error("roughness model is not calibrated")]
    Uncalibrated,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
