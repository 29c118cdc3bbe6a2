//! Geometric primitives shared by the solvers: rotations, the perspective
//! projection, and the rig calibration / observation types.
//!
//! Conventions: the world frame is gravity-aligned with `g_W = [0, 0, gamma]`,
//! and all solver outputs live in the reference coordinate system (RCS), the
//! IMU frame at the first timestamp of the window. Rotations are stored as
//! 3x3 matrices and re-orthonormalized only at ingestion boundaries.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec2 = Vector2<f64>;

/// Magnitude of the world gravity vector in m/s^2; `g_W = [0, 0, gamma]`.
pub const STANDARD_GRAVITY: f64 = 9.810;

/// Below this angle the exponential map and its Jacobians switch to a
/// second-order series; keeps relative error below 1e-12 at the branch point.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix such that `skew(a) * b = a x b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A rotation matrix, kept orthonormal by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix that is already known to be a rotation (products and
    /// exponentials of rotations). No validation is performed.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Validates orthonormality (`R^T R = I` and `det R = 1`, both within
    /// 1e-9 per entry) and wraps the matrix.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let gram = m.transpose() * m;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::invalid(
                "rotation",
                format!("R^T R deviates from identity by {ortho_err:.3e}"),
            ));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "rotation",
                format!("determinant {det} is not 1"),
            ));
        }
        Ok(Rotation(m))
    }

    /// Nearest rotation to an arbitrary matrix (polar factor via SVD). Used
    /// when ingesting calibration data that may carry rounding error.
    pub fn nearest(m: Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd of 3x3 always yields u");
        let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Flip the axis of least significance.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation(r)
    }

    /// Exponential map of so(3) (Rodrigues formula), with a second-order
    /// series below the small-angle threshold.
    pub fn exp(phi: &Vec3) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(phi);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rotation(Mat3::identity() + a * k + b * (k * k))
    }

    /// Logarithm map: the rotation vector `phi` with `exp(phi) = R` and
    /// `|phi| <= pi`.
    pub fn log(&self) -> Vec3 {
        let m = &self.0;
        let trace = m.trace();
        let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let anti = Vec3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        if theta < SMALL_ANGLE {
            return 0.5 * anti * (1.0 + theta * theta / 6.0);
        }
        if std::f64::consts::PI - theta < 1e-5 {
            // Near pi the antisymmetric part vanishes; recover the axis from
            // the diagonal of R = I + (1 - cos) (n n^T - I) + sin [n]x.
            let diag = Vec3::new(m[(0, 0)], m[(1, 1)], m[(2, 2)]);
            let one_minus_cos = 1.0 - cos_theta;
            let axis_sq = (diag.add_scalar(-cos_theta)) / one_minus_cos;
            let mut axis = Vec3::new(
                axis_sq.x.max(0.0).sqrt(),
                axis_sq.y.max(0.0).sqrt(),
                axis_sq.z.max(0.0).sqrt(),
            );
            // Fix signs from the off-diagonal sums, anchored on the largest
            // component.
            let imax = axis.imax();
            let off = |i: usize, j: usize| (m[(i, j)] + m[(j, i)]) * 0.5;
            match imax {
                0 => {
                    axis.y = axis.y.copysign(off(0, 1));
                    axis.z = axis.z.copysign(off(0, 2));
                }
                1 => {
                    axis.x = axis.x.copysign(off(0, 1));
                    axis.z = axis.z.copysign(off(1, 2));
                }
                _ => {
                    axis.x = axis.x.copysign(off(0, 2));
                    axis.y = axis.y.copysign(off(1, 2));
                }
            }
            // The sine part still carries the overall sign when not exactly pi.
            if anti.dot(&axis) < 0.0 {
                axis = -axis;
            }
            return axis * theta;
        }
        anti * (0.5 * theta / theta.sin())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// `R^T v` without materializing the transpose.
    pub fn rotate_back(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Exponential map as a free function.
pub fn exp_so3(phi: &Vec3) -> Rotation {
    Rotation::exp(phi)
}

/// Right Jacobian of SO(3) at `phi`: exp(phi + d) = exp(phi) exp(Jr(phi) d)
/// to first order. Series fallback below the small-angle threshold.
pub fn right_jacobian_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - a * k + b * (k * k)
}

/// Rotation `R_W` from the gravity-aligned world frame to the RCS: it maps
/// `[0, 0, gamma]` onto the direction of `g0` with zero rotation about the
/// gravity axis (minimal-angle rotation, yaw left unobservable).
///
/// Tie-break: for `g0` anti-parallel to the world axis the result is the
/// 180-degree rotation about x.
pub fn gravity_rotation(g0: &Vec3, gamma: f64) -> Result<Rotation> {
    let norm = g0.norm();
    if !(norm > 0.0) || gamma <= 0.0 {
        return Err(Error::Argument(
            "gravity_rotation requires a nonzero g0 and positive gamma".into(),
        ));
    }
    let dir = g0 / norm;
    let z = Vec3::z();
    let cos = dir.dot(&z).clamp(-1.0, 1.0);
    if 1.0 + cos < 1e-12 {
        // Anti-parallel: 180 degrees about x.
        return Ok(Rotation::exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)));
    }
    let axis = z.cross(&dir);
    let sin = axis.norm();
    if sin < 1e-15 {
        return Ok(Rotation::identity());
    }
    let angle = sin.atan2(cos);
    Ok(Rotation::exp(&(axis * (angle / sin))))
}

/// Perspective projection onto the z = 1 plane.
pub fn project(w: &Vec3) -> Result<Vec2> {
    if w.z.abs() < 1e-12 {
        return Err(Error::DegenerateProjection { z: w.z });
    }
    Ok(Vec2::new(w.x / w.z, w.y / w.z))
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Projects a camera-frame point to pixels.
    pub fn project_pixel(&self, w: &Vec3) -> Result<Vec2> {
        let n = project(w)?;
        Ok(Vec2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy))
    }

    /// Unit back-projection ray of a pixel.
    pub fn back_project(&self, pixel: &Vec2) -> Vec3 {
        let v = Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        );
        v / v.norm()
    }
}

/// One camera of the rig: pose in the IMU frame, intrinsics and the
/// rolling-shutter readout time per image row (0 for global shutter).
#[derive(Clone, Debug)]
pub struct CameraCalibration {
    /// Rotation from the camera frame to the IMU frame.
    pub r_c_i: Rotation,
    /// Camera position in the IMU frame, meters.
    pub p_c_i: Vec3,
    pub intrinsics: Intrinsics,
    pub image_height: u32,
    /// Seconds per image row; 0 means global shutter.
    pub row_readout: f64,
}

/// Camera-IMU rig calibration.
#[derive(Clone, Debug)]
pub struct RigCalibration {
    pub cameras: Vec<CameraCalibration>,
    /// IMU sampling period in seconds.
    pub imu_period: f64,
}

impl RigCalibration {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::invalid("calibration", "no cameras"));
        }
        if !(self.imu_period > 0.0) {
            return Err(Error::invalid("calibration", "imu_period must be > 0"));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            if cam.row_readout < 0.0 {
                return Err(Error::invalid(
                    "calibration",
                    format!("camera {i}: row_readout must be >= 0"),
                ));
            }
            if !(cam.intrinsics.fx > 0.0 && cam.intrinsics.fy > 0.0) {
                return Err(Error::invalid(
                    "calibration",
                    format!("camera {i}: fx and fy must be > 0"),
                ));
            }
        }
        Ok(())
    }
}

/// A single image observation of a map point.
#[derive(Clone, Debug)]
pub struct Observation {
    pub camera: usize,
    /// Pixel coordinates (possibly noisy).
    pub pixel: Vec2,
    /// Unit back-projection ray in the camera frame.
    pub ray: Vec3,
    /// Observation timestamp in window time, including the rolling-shutter
    /// row offset.
    pub time: f64,
}

/// All observations of one map point, ordered by time.
#[derive(Clone, Debug)]
pub struct FeatureTrack {
    pub point_id: u64,
    pub observations: Vec<Observation>,
}

impl FeatureTrack {
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() < 2 {
            return Err(Error::invalid(
                "track",
                format!("point {} has fewer than 2 observations", self.point_id),
            ));
        }
        for obs in &self.observations {
            if (obs.ray.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(
                    "track",
                    format!("point {}: ray is not unit norm", self.point_id),
                ));
            }
            if obs.ray.z <= 0.0 {
                return Err(Error::invalid(
                    "track",
                    format!("point {}: ray does not point forward", self.point_id),
                ));
            }
            if obs.time < 0.0 {
                return Err(Error::invalid(
                    "track",
                    format!("point {}: negative observation time", self.point_id),
                ));
            }
        }
        for pair in self.observations.windows(2) {
            let same_time = pair[1].time == pair[0].time;
            if pair[1].time < pair[0].time
                || (same_time && pair[1].camera == pair[0].camera)
            {
                return Err(Error::invalid(
                    "track",
                    format!(
                        "point {}: observations not ascending in time",
                        self.point_id
                    ),
                ));
            }
        }
        Ok(())
    }
}
