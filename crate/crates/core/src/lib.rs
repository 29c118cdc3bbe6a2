//! Closed-form visual-inertial state initialization.
//!
//! Given a short window of IMU samples and multi-view feature tracks from a
//! calibrated (possibly stereo, possibly rolling-shutter) camera rig, this
//! crate estimates the initial velocity, the gravity direction, optional
//! accelerometer/gyroscope biases and the 3D map points:
//!
//! - [`p2o`]: the point-to-observation closed-form solver. Each unknown
//!   point is related jointly to all of its observations; depths and points
//!   are eliminated analytically so only a 6x6 (or 9x9 with accelerometer
//!   bias) system is ever solved.
//! - [`o2o`]: the classic observation-to-observation baseline that pairs
//!   observations of the same point and solves one large sparse system.
//! - [`refiner`]: Levenberg-Marquardt minimization of the reprojection error
//!   with analytic Jacobians, a gravity-sphere parameterization and optional
//!   gyroscope-bias estimation.
//! - [`sim`]: an analytic trajectory and sensor simulator that provides
//!   exact ground truth for every estimate.

pub mod error;
pub mod geometry;
pub mod io;
pub mod o2o;
pub mod p2o;
pub mod preintegration;
pub mod refiner;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::{
    exp_so3, gravity_rotation, project, right_jacobian_so3, skew, CameraCalibration,
    FeatureTrack, Intrinsics, Mat3, Observation, RigCalibration, Rotation, Vec2, Vec3,
    STANDARD_GRAVITY,
};
pub use p2o::{InitState, SolverOptions};
pub use preintegration::{
    beta, constant_vector, integrate_rotations, preintegrate, ImuSample, ImuWindow,
    Preintegral, PreintegralTable,
};
