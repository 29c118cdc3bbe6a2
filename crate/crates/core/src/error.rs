//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Perspective division by a (near-)zero depth.
    #[error("degenerate projection: |w_z| = {z:.3e} is below 1e-12")]
    DegenerateProjection { z: f64 },

    /// A function argument violates its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A query time falls outside the integrated IMU window.
    #[error("time {t} s is outside the IMU window [0, {end} s]")]
    OutOfRange { t: f64, end: f64 },

    /// An observation has no matching preintegral at its timestamp.
    #[error("no preintegral for observation at t = {t} s (camera {camera})")]
    DataAlignment { t: f64, camera: usize },

    /// Every track was dropped as parallax-degenerate.
    #[error("insufficient parallax: all tracks degenerate")]
    InsufficientParallax,

    /// The normal equations could not be factorized.
    #[error("ill-conditioned system (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    /// The nonlinear refinement failed to make progress at maximum damping.
    #[error("refinement diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    /// No evaluation window satisfies the selection criteria.
    #[error("empty selection: no window satisfies the criteria")]
    EmptySelection,

    /// Structured data (calibration, tracks, window) failed validation.
    #[error("invalid {what}: {why}")]
    InvalidData { what: &'static str, why: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidData {
            what,
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
