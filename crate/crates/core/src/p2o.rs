//! Point-to-observation closed-form initializer.
//!
//! Every unknown 3D point is related jointly to all of its observations
//! through the linear kinematic model, with the point itself and the
//! per-observation ray lengths kept as unknowns. Both groups of auxiliaries
//! are then eliminated analytically:
//!
//! - ray lengths: each observation block is multiplied by the rank-2
//!   projector `I - q q^T` of its (unit) ray, which costs no inversion;
//! - points: the per-track Gram blocks `S_j = N_j I - sum q q^T` are 3x3 and
//!   invert in closed form.
//!
//! What remains is a 6x6 system in velocity and gravity (9x9 when the
//! accelerometer bias is estimated), accumulated directly as normal
//! equations while streaming over the tracks: no large matrix is ever
//! materialized. Points are recovered by back-substitution, which doubles as
//! a multi-view midpoint triangulation and yields signed ray lengths for the
//! cheirality check.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::{
    gravity_rotation, FeatureTrack, Mat3, RigCalibration, Rotation, Vec3, STANDARD_GRAVITY,
};
use crate::preintegration::{constant_vector, PreintegralTable};

/// Options shared by the closed-form solvers.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Estimate the accelerometer bias (9x9 system) instead of assuming it
    /// zero (6x6).
    pub estimate_accel_bias: bool,
    /// Re-impose the known gravity magnitude on the solution with one
    /// Gauss-Newton step on the sphere.
    pub enforce_gravity_norm: bool,
    /// Gravity magnitude, m/s^2.
    pub gamma: f64,
    /// Tracks with fewer observations are skipped.
    pub min_observations_per_track: usize,
    /// Condition numbers above this flag the solution as suspect.
    pub condition_warn_threshold: f64,
    /// Pairwise baseline only: pair all observation combinations instead of
    /// pairing against the first observation.
    pub all_pairs: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            estimate_accel_bias: false,
            enforce_gravity_norm: false,
            gamma: STANDARD_GRAVITY,
            min_observations_per_track: 2,
            condition_warn_threshold: 1e8,
            all_pairs: false,
        }
    }
}

/// Solution quality indicators.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Condition number of the solved normal equations.
    pub condition_number: f64,
    /// Observations reconstructed behind their camera.
    pub negative_depth_count: usize,
    /// Tracks dropped for degeneracy or too few observations.
    pub dropped_tracks: usize,
    /// Condition number exceeded the warn threshold.
    pub ill_conditioned: bool,
    /// Pairwise baseline: mean spread of the per-track ray-length
    /// back-projections, meters.
    pub lambda_spread: f64,
}

/// Initialization estimate in the reference coordinate system.
#[derive(Clone, Debug)]
pub struct InitState {
    pub v0: Vec3,
    pub g0: Vec3,
    /// Accelerometer bias compensation; zero when not estimated.
    pub b_a: Vec3,
    /// Gyroscope bias; zero unless refined.
    pub b_g: Vec3,
    /// Rotation from the gravity-aligned world frame to the RCS.
    pub r_w: Rotation,
    pub points: BTreeMap<u64, Vec3>,
    /// Signed ray length per (point, observation index).
    pub depths: BTreeMap<(u64, usize), f64>,
    pub diagnostics: Diagnostics,
}

/// Per-observation row of the linear model: coefficients of
/// `[t I | (t^2/2) I | B | -I | q]` against the constant vector `c`.
#[derive(Clone, Debug)]
pub struct RowData {
    pub t: f64,
    pub b: Mat3,
    /// Observation ray rotated into the RCS; unit norm.
    pub q: Vec3,
    pub c: Vec3,
}

/// Builds the model rows of one track from its preintegrals.
pub fn build_rows(
    track: &FeatureTrack,
    table: &PreintegralTable,
    calib: &RigCalibration,
) -> Result<Vec<RowData>> {
    let mut rows = Vec::with_capacity(track.observations.len());
    for obs in &track.observations {
        let pre = table.get(obs.time).ok_or(Error::DataAlignment {
            t: obs.time,
            camera: obs.camera,
        })?;
        let cam = calib
            .cameras
            .get(obs.camera)
            .ok_or_else(|| Error::invalid("track", format!("camera {} unknown", obs.camera)))?;
        let r_c = pre.r_i * cam.r_c_i;
        rows.push(RowData {
            t: pre.t,
            b: pre.b,
            q: r_c.rotate(&obs.ray),
            c: constant_vector(pre, cam),
        });
    }
    Ok(rows)
}

/// Rank-2 projector `I - q q^T` that annihilates the ray direction.
pub fn ray_projector(q: &Vec3) -> Mat3 {
    Mat3::identity() - q * q.transpose()
}

/// Projectors eliminating the ray-length unknown of each row.
pub fn eliminate_depths(rows: &[RowData]) -> Vec<Mat3> {
    rows.iter().map(|r| ray_projector(&r.q)).collect()
}

fn add_block(a: &mut SMatrix<f64, 9, 9>, r: usize, c: usize, m: &Mat3, k: f64) {
    for j in 0..3 {
        for i in 0..3 {
            a[(r + i, c + j)] += k * m[(i, j)];
        }
    }
}

fn add_block_u(u: &mut SMatrix<f64, 3, 9>, c: usize, m: &Mat3, k: f64) {
    for j in 0..3 {
        for i in 0..3 {
            u[(i, c + j)] += k * m[(i, j)];
        }
    }
}

fn add_vec(b: &mut SVector<f64, 9>, r: usize, v: &Vec3, k: f64) {
    for i in 0..3 {
        b[r + i] += k * v[i];
    }
}

/// Cached per-track elimination data for back-substitution.
#[derive(Clone, Debug)]
pub struct TrackCache {
    pub point_id: u64,
    /// Inverse of the track Gram block `S = N I - sum q q^T`.
    pub h: Mat3,
    /// Accumulated projected model columns `sum P [t I | (t^2/2) I | B]`.
    pub u: SMatrix<f64, 3, 9>,
    /// Accumulated projected constants `sum P c`.
    pub d: Vec3,
}

/// The doubly-eliminated normal equations plus per-track caches.
#[derive(Debug)]
pub struct EliminatedSystem {
    pub a: SMatrix<f64, 9, 9>,
    pub b: SVector<f64, 9>,
    /// Active dimension: 6 without accelerometer bias, 9 with.
    pub dim: usize,
    pub per_track: Vec<TrackCache>,
    pub dropped_tracks: usize,
}

/// Relative eigenvalue threshold below which a track's Gram block counts as
/// parallax-degenerate.
const DEGENERACY_EPS: f64 = 1e-8;

/// Streams the projected rows track by track into the reduced normal
/// equations, eliminating the points analytically.
pub fn eliminate_points(
    rows_per_track: &[(u64, Vec<RowData>)],
    options: &SolverOptions,
) -> Result<EliminatedSystem> {
    let with_bias = options.estimate_accel_bias;
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    let mut b = SVector::<f64, 9>::zeros();
    let mut per_track = Vec::with_capacity(rows_per_track.len());
    let mut dropped = 0usize;

    for (point_id, rows) in rows_per_track {
        if rows.len() < options.min_observations_per_track.max(2) {
            dropped += 1;
            continue;
        }
        let n = rows.len() as f64;
        let mut qq_sum = Mat3::zeros();
        for row in rows {
            qq_sum += row.q * row.q.transpose();
        }
        let s = n * Mat3::identity() - qq_sum;
        if s.symmetric_eigenvalues().min() <= DEGENERACY_EPS * n {
            dropped += 1;
            continue;
        }
        let h = s.try_inverse().ok_or(Error::InsufficientParallax)?;

        let mut u = SMatrix::<f64, 3, 9>::zeros();
        let mut d = Vec3::zeros();
        let mut a_track = SMatrix::<f64, 9, 9>::zeros();
        let mut b_track = SVector::<f64, 9>::zeros();
        for row in rows {
            let p = ray_projector(&row.q);
            let t = row.t;
            let half_t2 = 0.5 * t * t;
            let pc = p * row.c;

            add_block_u(&mut u, 0, &p, t);
            add_block_u(&mut u, 3, &p, half_t2);
            d += pc;

            // Upper-triangle blocks only; mirrored once at the end.
            add_block(&mut a_track, 0, 0, &p, t * t);
            add_block(&mut a_track, 0, 3, &p, t * half_t2);
            add_block(&mut a_track, 3, 3, &p, half_t2 * half_t2);
            add_vec(&mut b_track, 0, &pc, t);
            add_vec(&mut b_track, 3, &pc, half_t2);

            if with_bias {
                let pb = p * row.b;
                add_block_u(&mut u, 6, &pb, 1.0);
                add_block(&mut a_track, 0, 6, &pb, t);
                add_block(&mut a_track, 3, 6, &pb, half_t2);
                add_block(&mut a_track, 6, 6, &(row.b.transpose() * pb), 1.0);
                add_vec(&mut b_track, 6, &(row.b.transpose() * pc), 1.0);
            }
        }
        // Marginalize the point: subtract U^T H U and U^T H d.
        a_track -= u.transpose() * (h * u);
        b_track -= u.transpose() * (h * d);
        a += a_track;
        b += b_track;
        per_track.push(TrackCache {
            point_id: *point_id,
            h,
            u,
            d,
        });
    }

    if per_track.is_empty() {
        return Err(Error::InsufficientParallax);
    }
    // The loop fills the upper triangle of the observation part; the lower
    // triangle still carries the (symmetric) marginalization terms only.
    for r in 0..9 {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }
    Ok(EliminatedSystem {
        a,
        b,
        dim: if with_bias { 9 } else { 6 },
        per_track,
        dropped_tracks: dropped,
    })
}

/// Condition number of the active block of the normal equations.
fn condition_number(system: &EliminatedSystem) -> f64 {
    let d = system.dim;
    let a = system.a.view((0, 0), (d, d)).into_owned();
    let eigs = a.symmetric_eigenvalues();
    let max = eigs.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
    let min = eigs.iter().fold(f64::INFINITY, |m, &e| m.min(e.abs()));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Solves the reduced normal equations; optionally re-imposes the gravity
/// magnitude with one Gauss-Newton step in the sphere tangent, retracting
/// the result back onto the sphere.
fn solve_reduced(
    system: &EliminatedSystem,
    options: &SolverOptions,
) -> Result<(SVector<f64, 9>, f64)> {
    let d = system.dim;
    let a = system.a.view((0, 0), (d, d)).into_owned();
    let b = system.b.rows(0, d).into_owned();
    let cond = condition_number(system);
    // Jacobi scaling evens out the time-power disparity between the
    // velocity, gravity and bias columns before factorization.
    let mut scale = nalgebra::DVector::<f64>::zeros(d);
    for i in 0..d {
        scale[i] = if a[(i, i)] > 0.0 { a[(i, i)].sqrt() } else { 1.0 };
    }
    let mut a_s = a.clone();
    let mut b_s = b.clone();
    for r in 0..d {
        for c in 0..d {
            a_s[(r, c)] /= scale[r] * scale[c];
        }
        b_s[r] /= scale[r];
    }
    let chol = a_s
        .cholesky()
        .ok_or(Error::IllConditioned { condition: cond })?;
    let mut z = chol.solve(&b_s);
    for i in 0..d {
        z[i] /= scale[i];
    }
    let mut z9 = SVector::<f64, 9>::zeros();
    z9.rows_mut(0, d).copy_from(&z);

    if options.enforce_gravity_norm {
        let g = Vec3::new(z9[3], z9[4], z9[5]);
        let norm = g.norm();
        if norm > 1e-12 {
            let ghat = g / norm;
            let pick = if ghat.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let e1 = (pick - ghat * ghat.dot(&pick)).normalize();
            let e2 = ghat.cross(&e1);
            let mut z0 = z9.rows(0, d).into_owned();
            let g_sphere = ghat * options.gamma;
            for i in 0..3 {
                z0[3 + i] = g_sphere[i];
            }
            // T maps [v, sphere tangent, bias] into the full state.
            let mut t_mat = nalgebra::DMatrix::<f64>::zeros(d, d - 1);
            for i in 0..3 {
                t_mat[(i, i)] = 1.0;
                t_mat[(3 + i, 3)] = e1[i];
                t_mat[(3 + i, 4)] = e2[i];
            }
            for i in 6..d {
                t_mat[(i, i - 1)] = 1.0;
            }
            let rhs = t_mat.transpose() * (&b - &a * &z0);
            let tat = t_mat.transpose() * &a * &t_mat;
            if let Some(chol_t) = tat.cholesky() {
                let mut z_new = z0 + t_mat * chol_t.solve(&rhs);
                let g_new = Vec3::new(z_new[3], z_new[4], z_new[5]).normalize() * options.gamma;
                for i in 0..3 {
                    z_new[3 + i] = g_new[i];
                }
                z9.rows_mut(0, d).copy_from(&z_new);
            }
        }
    }
    Ok((z9, cond))
}

/// Back-substitutes the solved state into the per-track caches, recovering
/// every point (multi-view midpoint of its projected residuals).
pub fn reconstruct_points(system: &EliminatedSystem, z: &SVector<f64, 9>) -> BTreeMap<u64, Vec3> {
    system
        .per_track
        .iter()
        .map(|cache| (cache.point_id, cache.h * (cache.u * z - cache.d)))
        .collect()
}

/// Camera position implied by one row and the solved state.
pub(crate) fn camera_position(row: &RowData, z: &SVector<f64, 9>) -> Vec3 {
    let v = Vec3::new(z[0], z[1], z[2]);
    let g = Vec3::new(z[3], z[4], z[5]);
    let ba = Vec3::new(z[6], z[7], z[8]);
    v * row.t + g * (0.5 * row.t * row.t) + row.b * ba - row.c
}

fn assemble_state(
    z: SVector<f64, 9>,
    cond: f64,
    rows_per_track: &[(u64, Vec<RowData>)],
    system: &EliminatedSystem,
    options: &SolverOptions,
) -> Result<InitState> {
    let points = reconstruct_points(system, &z);
    let mut depths = BTreeMap::new();
    let mut negative = 0usize;
    for (pid, rows) in rows_per_track {
        let Some(point) = points.get(pid) else {
            continue;
        };
        for (i, row) in rows.iter().enumerate() {
            let lambda = row.q.dot(&(point - camera_position(row, &z)));
            if lambda < 0.0 {
                negative += 1;
            }
            depths.insert((*pid, i), lambda);
        }
    }
    let v0 = Vec3::new(z[0], z[1], z[2]);
    let g0 = Vec3::new(z[3], z[4], z[5]);
    let b_a = Vec3::new(z[6], z[7], z[8]);
    let r_w = if g0.norm() > 1e-12 {
        gravity_rotation(&g0, g0.norm())?
    } else {
        Rotation::identity()
    };
    Ok(InitState {
        v0,
        g0,
        b_a,
        b_g: Vec3::zeros(),
        r_w,
        points,
        depths,
        diagnostics: Diagnostics {
            condition_number: cond,
            negative_depth_count: negative,
            dropped_tracks: system.dropped_tracks,
            ill_conditioned: cond > options.condition_warn_threshold,
            lambda_spread: 0.0,
        },
    })
}

pub(crate) fn rows_for_tracks(
    tracks: &[FeatureTrack],
    table: &PreintegralTable,
    calib: &RigCalibration,
) -> Result<Vec<(u64, Vec<RowData>)>> {
    tracks
        .iter()
        .map(|t| Ok((t.point_id, build_rows(t, table, calib)?)))
        .collect()
}

pub(crate) fn observation_times(tracks: &[FeatureTrack]) -> Vec<f64> {
    tracks
        .iter()
        .flat_map(|t| t.observations.iter().map(|o| o.time))
        .collect()
}

/// Closed-form solve from precomputed preintegrals (the timed region of the
/// benchmarks: row building, elimination, solve and back-substitution).
pub fn solve_with_table(
    tracks: &[FeatureTrack],
    table: &PreintegralTable,
    calib: &RigCalibration,
    options: &SolverOptions,
) -> Result<InitState> {
    let rows = rows_for_tracks(tracks, table, calib)?;
    let system = eliminate_points(&rows, options)?;
    let (z, cond) = solve_reduced(&system, options)?;
    assemble_state(z, cond, &rows, &system, options)
}

/// Full closed-form solve: preintegrates the window at every observation
/// time, then builds and solves the reduced system.
pub fn solve(
    tracks: &[FeatureTrack],
    window: &crate::preintegration::ImuWindow,
    calib: &RigCalibration,
    options: &SolverOptions,
) -> Result<InitState> {
    calib.validate()?;
    for track in tracks {
        track.validate()?;
    }
    let times = observation_times(tracks);
    let table = PreintegralTable::build(window, &times, &Vec3::zeros())?;
    solve_with_table(tracks, &table, calib, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preintegration::{ImuSample, ImuWindow};
    use crate::sim::{
        build_sequence, window_select, NoiseSpec, SceneSpec, TrajectoryKind, TrajectorySpec,
    };
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn still_window(duration: f64) -> ImuWindow {
        let ts = 1.0 / 800.0;
        let n = (duration * 800.0) as usize;
        ImuWindow::new(
            (0..=n)
                .map(|k| ImuSample {
                    time: k as f64 * ts,
                    gyro: Vec3::zeros(),
                    accel: Vec3::zeros(),
                })
                .collect(),
            ts,
        )
        .unwrap()
    }

    #[test]
    fn rows_keep_rays_unit_and_identity_case() {
        let window = still_window(0.2);
        let calib = crate::sim::default_rig(false, false, 800.0);
        let track = FeatureTrack {
            point_id: 0,
            observations: vec![
                crate::geometry::Observation {
                    camera: 0,
                    pixel: crate::geometry::Vec2::new(319.5, 239.5),
                    ray: Vec3::z(),
                    time: 0.0,
                },
                crate::geometry::Observation {
                    camera: 0,
                    pixel: crate::geometry::Vec2::new(319.5, 239.5),
                    ray: Vec3::z(),
                    time: 0.1,
                },
            ],
        };
        let table = PreintegralTable::build(&window, &[0.0, 0.1], &Vec3::zeros()).unwrap();
        let rows = build_rows(&track, &table, &calib).unwrap();
        assert_eq!(rows[0].q, Vec3::z());
        for row in &rows {
            assert_abs_diff_eq!(row.q.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotated_rays_stay_unit() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let phi = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let u = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() + 0.5,
            )
            .normalize();
            let q = Rotation::exp(&phi).rotate(&u);
            assert_abs_diff_eq!(q.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn projector_algebra() {
        let p = ray_projector(&Vec3::z());
        assert_eq!(p, Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0));
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let q = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let p = ray_projector(&q);
            assert!((p * q).norm() < 1e-12);
            assert!((p * p - p).abs().max() < 1e-12);
            assert!((p - p.transpose()).abs().max() < 1e-15);
        }
    }

    fn sim_rows(
        sigma: f64,
        seed: u64,
    ) -> (
        crate::sim::SimulatedWindow,
        Vec<(u64, Vec<RowData>)>,
        PreintegralTable,
        RigCalibration,
    ) {
        let scene = SceneSpec::new(
            TrajectorySpec::new(TrajectoryKind::WalkForward, 4.0),
            if sigma > 0.0 {
                NoiseSpec::with_pixel_sigma(seed, sigma)
            } else {
                NoiseSpec::noiseless(seed)
            },
        );
        let seq = build_sequence(&scene).unwrap();
        let plans = window_select(&seq, 5, 3, 0.01).unwrap();
        let win = seq.realize(&plans[0], 0).unwrap();
        let times = observation_times(&win.tracks);
        let table = PreintegralTable::build(&win.window, &times, &Vec3::zeros()).unwrap();
        let rows = rows_for_tracks(&win.tracks, &table, &seq.rig).unwrap();
        (win, rows, table, seq.rig.clone())
    }

    #[test]
    fn simulated_rows_close_the_linear_model() {
        let (win, rows, _, _) = sim_rows(0.0, 21);
        for (pid, track_rows) in &rows {
            let m = win.truth.points[pid];
            for (i, row) in track_rows.iter().enumerate() {
                let lambda = win.truth.lambdas[&(*pid, i)];
                let lhs = win.truth.v0 * row.t + win.truth.g0 * (0.5 * row.t * row.t) - m
                    + row.q * lambda;
                assert!(
                    (lhs - row.c).norm() < 1e-9,
                    "row residual {:.3e}",
                    (lhs - row.c).norm()
                );
            }
        }
    }

    #[test]
    fn gram_blocks_and_symmetry_hold() {
        let (_, rows, _, _) = sim_rows(0.3, 22);
        let system = eliminate_points(&rows, &SolverOptions::default()).unwrap();
        // H S = I for every kept track, with S in its direct form.
        let by_id: BTreeMap<u64, &Vec<RowData>> =
            rows.iter().map(|(id, r)| (*id, r)).collect();
        for cache in &system.per_track {
            let track_rows = by_id[&cache.point_id];
            let mut qq = Mat3::zeros();
            for row in track_rows.iter() {
                qq += row.q * row.q.transpose();
            }
            let s = track_rows.len() as f64 * Mat3::identity() - qq;
            assert!((cache.h * s - Mat3::identity()).abs().max() < 1e-9);
        }
        // The assembled normal equations are symmetric.
        let asym = (system.a - system.a.transpose()).abs().max();
        assert!(asym <= 1e-12 * system.a.abs().max());
    }

    #[test]
    fn zero_parallax_track_is_dropped() {
        let ray = Vec3::new(0.1, -0.2, 1.0).normalize();
        let rows = vec![(
            0u64,
            (0..5)
                .map(|i| RowData {
                    t: i as f64 * 0.1,
                    b: Mat3::zeros(),
                    q: ray,
                    c: Vec3::zeros(),
                })
                .collect::<Vec<_>>(),
        )];
        let err = eliminate_points(&rows, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientParallax));
    }

    #[test]
    fn static_biased_system_is_rank_deficient() {
        // Identity rotations make the bias block a scaled copy of the
        // gravity block: the 9x9 normal equations lose rank.
        let scene = SceneSpec::new(
            TrajectorySpec::new(TrajectoryKind::Static, 2.0),
            NoiseSpec::noiseless(23),
        );
        let seq = build_sequence(&scene).unwrap();
        let plan = crate::sim::WindowPlan {
            index: 0,
            frames: vec![0, 3, 6, 9, 12],
            anchor_sample: 0,
            t0: 0.0,
        };
        let win = seq.realize(&plan, 0).unwrap();
        let times = observation_times(&win.tracks);
        let table = PreintegralTable::build(&win.window, &times, &Vec3::zeros()).unwrap();
        let rows = rows_for_tracks(&win.tracks, &table, &seq.rig).unwrap();
        let options = SolverOptions {
            estimate_accel_bias: true,
            ..Default::default()
        };
        let system = eliminate_points(&rows, &options).unwrap();
        let svd = system.a.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        assert!(
            smin / smax < 1e-10,
            "sigma_min/sigma_max = {:.3e}",
            smin / smax
        );
    }

    /// Dense oracle: the full stacked system over (state, points, depths),
    /// solved by SVD pseudo-inverse.
    fn dense_solution(
        rows: &[(u64, Vec<RowData>)],
        with_bias: bool,
    ) -> (SVector<f64, 9>, BTreeMap<u64, Vec3>) {
        let d = if with_bias { 9 } else { 6 };
        let m = rows.len();
        let n_obs: usize = rows.iter().map(|(_, r)| r.len()).sum();
        let n_cols = d + 3 * m + n_obs;
        let mut a = nalgebra::DMatrix::<f64>::zeros(3 * n_obs, n_cols);
        let mut rhs = nalgebra::DVector::<f64>::zeros(3 * n_obs);
        let mut obs_idx = 0usize;
        for (j, (_, track_rows)) in rows.iter().enumerate() {
            for row in track_rows {
                let r0 = 3 * obs_idx;
                for i in 0..3 {
                    a[(r0 + i, i)] = row.t;
                    a[(r0 + i, 3 + i)] = 0.5 * row.t * row.t;
                    if with_bias {
                        for c in 0..3 {
                            a[(r0 + i, 6 + c)] = row.b[(i, c)];
                        }
                    }
                    a[(r0 + i, d + 3 * j + i)] = -1.0;
                    a[(r0 + i, d + 3 * m + obs_idx)] = row.q[i];
                    rhs[r0 + i] = row.c[i];
                }
                obs_idx += 1;
            }
        }
        let svd = a.svd(true, true);
        let x = svd.solve(&rhs, 1e-12).expect("dense solve");
        let mut z = SVector::<f64, 9>::zeros();
        for i in 0..d {
            z[i] = x[i];
        }
        let points = rows
            .iter()
            .enumerate()
            .map(|(j, (pid, _))| {
                (
                    *pid,
                    Vec3::new(x[d + 3 * j], x[d + 3 * j + 1], x[d + 3 * j + 2]),
                )
            })
            .collect();
        (z, points)
    }

    /// Rows from an omnidirectional synthetic scene: strong rotation for the
    /// bias-gravity separation, rays built directly from the geometry so the
    /// camera field of view imposes no limit.
    fn rotating_rows(seed: u64) -> Vec<(u64, Vec<RowData>)> {
        use rand_distr::Distribution;
        let ts = 1.0 / 800.0;
        let gyro = |t: f64| {
            Vec3::new(
                1.2 * (2.0 * std::f64::consts::PI * t).sin(),
                0.9 * (3.0 * std::f64::consts::PI * t).cos(),
                0.5 * (2.0 * std::f64::consts::PI * t).cos(),
            )
        };
        let accel = |t: f64| {
            Vec3::new(
                1.0 * (4.0 * std::f64::consts::PI * t).sin(),
                -0.8 * (2.0 * std::f64::consts::PI * t).cos(),
                9.0 + 0.5 * (2.0 * std::f64::consts::PI * t).sin(),
            )
        };
        let samples: Vec<ImuSample> = (0..=800)
            .map(|k| ImuSample {
                time: k as f64 * ts,
                gyro: gyro(k as f64 * ts),
                accel: accel(k as f64 * ts),
            })
            .collect();
        let window = ImuWindow::new(samples, ts).unwrap();
        let v_true = Vec3::new(0.4, -0.2, 0.6);
        let g_true = Vec3::new(1.0, -2.0, 9.5);
        // Points spread all around the rig.
        let dirs = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.3, 0.1),
            Vec3::new(0.2, 1.0, -0.2),
            Vec3::new(0.0, -1.0, 0.4),
            Vec3::new(0.3, 0.2, 1.0),
            Vec3::new(-0.2, 0.4, -1.0),
            Vec3::new(1.0, 1.0, 0.5),
            Vec3::new(-1.0, -0.8, 0.7),
            Vec3::new(0.8, -1.0, -0.6),
            Vec3::new(-0.7, 1.0, 1.0),
            Vec3::new(0.5, 0.5, -1.2),
            Vec3::new(-1.1, -0.2, -0.9),
        ];
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let gauss = rand_distr::Normal::new(0.0, 3e-4).unwrap();
        let times: Vec<f64> = (0..8).map(|i| i as f64 * 0.125).collect();
        let table = PreintegralTable::build(&window, &times, &Vec3::zeros()).unwrap();
        dirs.iter()
            .enumerate()
            .map(|(pid, dir)| {
                let depth = 3.0 + (pid as f64) * 0.7;
                let m = dir.normalize() * depth;
                let rows = times
                    .iter()
                    .map(|&t| {
                        let pre = table.get(t).unwrap();
                        let c = -pre.accum; // no camera offset
                        let p_cam = v_true * t + g_true * (0.5 * t * t) - c;
                        let q_clean = (m - p_cam).normalize();
                        let noise = Vec3::new(
                            gauss.sample(&mut rng),
                            gauss.sample(&mut rng),
                            gauss.sample(&mut rng),
                        );
                        RowData {
                            t,
                            b: pre.b,
                            q: (q_clean + noise).normalize(),
                            c,
                        }
                    })
                    .collect();
                (pid as u64, rows)
            })
            .collect()
    }

    #[test]
    fn elimination_matches_dense_least_squares() {
        for with_bias in [false, true] {
            let rows = if with_bias {
                rotating_rows(24)
            } else {
                sim_rows(0.3, 24).1
            };
            // Keep the dense problem small but spread over the image grid.
            let rows: Vec<_> = rows.into_iter().step_by(8).take(12).collect();
            let options = SolverOptions {
                estimate_accel_bias: with_bias,
                ..Default::default()
            };
            let system = eliminate_points(&rows, &options).unwrap();
            let (z, _) = solve_reduced(&system, &options).unwrap();
            let points = reconstruct_points(&system, &z);
            let (z_dense, points_dense) = dense_solution(&rows, with_bias);
            let scale = z_dense.norm().max(1.0);
            assert!(
                (z - z_dense).norm() / scale < 1e-8,
                "state deviation {:.3e} (bias {with_bias})",
                (z - z_dense).norm() / scale
            );
            for (pid, p) in &points {
                let pd = points_dense[pid];
                assert!(
                    (p - pd).norm() / pd.norm().max(1.0) < 1e-8,
                    "point {pid} deviation {:.3e}",
                    (p - pd).norm()
                );
            }
        }
    }

    #[test]
    fn zero_noise_recovery_is_exact() {
        let (win, _, table, rig) = sim_rows(0.0, 25);
        let state =
            solve_with_table(&win.tracks, &table, &rig, &SolverOptions::default()).unwrap();
        let vel_err = (state.v0 - win.truth.v0).norm() / win.truth.v0.norm();
        let grav_err = (state.g0 - win.truth.g0).norm() / win.truth.g0.norm();
        assert!(vel_err < 1e-6, "velocity error {vel_err:.3e}");
        assert!(grav_err < 1e-6, "gravity error {grav_err:.3e}");
        for (pid, p) in &state.points {
            let gt = win.truth.points[pid];
            assert!((p - gt).norm() / gt.norm() < 1e-6);
        }
        for depth in state.depths.values() {
            assert!(*depth > 0.0);
        }
        assert_eq!(state.diagnostics.negative_depth_count, 0);
        // The gravity-aligned frame maps the world axis onto g0.
        let aligned = state.r_w.rotate_back(&state.g0);
        assert!((aligned - Vec3::new(0.0, 0.0, state.g0.norm())).norm() < 1e-9);
    }

    #[test]
    fn gravity_norm_constraint_is_exact_on_the_sphere() {
        let (_, rows, _, _) = sim_rows(0.5, 26);
        let options = SolverOptions {
            enforce_gravity_norm: true,
            ..Default::default()
        };
        let system = eliminate_points(&rows, &options).unwrap();
        let (z, _) = solve_reduced(&system, &options).unwrap();
        let g = Vec3::new(z[3], z[4], z[5]);
        assert_abs_diff_eq!(g.norm(), STANDARD_GRAVITY, epsilon = 1e-9);
    }

    #[test]
    fn stationary_rotating_window_recovers_accel_bias() {
        // Rotation about two axes separates the bias from gravity. The
        // estimated compensation cancels the injected measurement offset.
        let injected = Vec3::new(0.2, -0.15, 0.1);
        let mut scene = SceneSpec::new(
            TrajectorySpec::new(TrajectoryKind::HeadMoving, 4.0),
            NoiseSpec {
                accel_bias: [injected.x, injected.y, injected.z],
                ..NoiseSpec::noiseless(27)
            },
        );
        scene.trajectory.bob_amplitude = 0.0;
        scene.n_frames = 7;
        scene.min_speed = 0.0;
        let seq = build_sequence(&scene).unwrap();
        let plans = window_select(&seq, 7, 3, 0.0).unwrap();
        let win = seq.realize(&plans[0], 0).unwrap();
        let options = SolverOptions {
            estimate_accel_bias: true,
            ..Default::default()
        };
        let state = solve(&win.tracks, &win.window, &seq.rig, &options).unwrap();
        let expected = -injected;
        assert!(
            (state.b_a - expected).norm() < 0.05 * injected.norm(),
            "bias error {:.3e}",
            (state.b_a - expected).norm()
        );
        assert!(
            (state.v0 - win.truth.v0).norm() < 1e-3,
            "velocity error {:.3e}",
            (state.v0 - win.truth.v0).norm()
        );
    }

    #[test]
    fn two_ray_reconstruction_is_midpoint_triangulation() {
        // Known static poses: the state contributes nothing and the
        // back-substitution reduces to classic midpoint triangulation.
        let cams = [Vec3::zeros(), Vec3::new(0.4, 0.0, 0.0)];
        let m_true = Vec3::new(0.1, 0.3, 5.0);
        let mut rows: Vec<RowData> = cams
            .iter()
            .map(|p_c| RowData {
                t: 0.0,
                b: Mat3::zeros(),
                q: (m_true - p_c).normalize(),
                c: -p_c,
            })
            .collect();
        // Perturb the rays slightly so the midpoint is non-trivial.
        rows[0].q = (rows[0].q + Vec3::new(4e-4, -2e-4, 0.0)).normalize();
        rows[1].q = (rows[1].q + Vec3::new(-3e-4, 2.5e-4, 0.0)).normalize();

        let tracks = vec![(0u64, rows.clone())];
        let system = eliminate_points(&tracks, &SolverOptions::default()).unwrap();
        let z = SVector::<f64, 9>::zeros();
        let points = reconstruct_points(&system, &z);

        // Independent midpoint formula on the same rays.
        let mut s = Mat3::zeros();
        let mut rhs = Vec3::zeros();
        for row in &rows {
            let p = ray_projector(&row.q);
            s += p;
            rhs += p * (-row.c);
        }
        let midpoint = s.try_inverse().unwrap() * rhs;
        assert!((points[&0] - midpoint).norm() < 1e-10);
        assert!((points[&0] - m_true).norm() < 0.05);
    }

    #[test]
    fn behind_camera_depths_are_counted() {
        // Two diverging rays intersect behind the cameras.
        let rows = vec![(
            0u64,
            vec![
                RowData {
                    t: 0.0,
                    b: Mat3::zeros(),
                    q: Vec3::new(-0.2, 0.0, 1.0).normalize(),
                    c: Vec3::zeros(),
                },
                RowData {
                    t: 0.0,
                    b: Mat3::zeros(),
                    q: Vec3::new(0.2, 0.0, 1.0).normalize(),
                    c: -Vec3::new(0.1, 0.0, 0.0),
                },
            ],
        )];
        let system = eliminate_points(&rows, &SolverOptions::default()).unwrap();
        let z = SVector::<f64, 9>::zeros();
        let state = assemble_state(z, 1.0, &rows, &system, &SolverOptions::default()).unwrap();
        assert_eq!(state.diagnostics.negative_depth_count, 2);
    }

    #[test]
    fn solution_is_equivariant_under_rcs_rotation() {
        let (win, _, table, rig) = sim_rows(0.0, 28);
        let state =
            solve_with_table(&win.tracks, &table, &rig, &SolverOptions::default()).unwrap();

        // Remount the virtual sensor: rotate measurements and extrinsics.
        let r = Rotation::exp(&Vec3::new(0.3, -0.5, 0.8));
        let samples: Vec<ImuSample> = win
            .window
            .samples()
            .iter()
            .map(|s| ImuSample {
                time: s.time,
                gyro: r.rotate(&s.gyro),
                accel: r.rotate(&s.accel),
            })
            .collect();
        let window_r = ImuWindow::new(samples, win.window.imu_period()).unwrap();
        let rig_r = RigCalibration {
            cameras: rig
                .cameras
                .iter()
                .map(|c| crate::geometry::CameraCalibration {
                    r_c_i: r * c.r_c_i,
                    p_c_i: r.rotate(&c.p_c_i),
                    ..c.clone()
                })
                .collect(),
            imu_period: rig.imu_period,
        };
        let state_r = solve(&win.tracks, &window_r, &rig_r, &SolverOptions::default()).unwrap();
        assert!((state_r.v0 - r.rotate(&state.v0)).norm() < 1e-9);
        assert!((state_r.g0 - r.rotate(&state.g0)).norm() < 1e-9);
        let mut worst = 0.0f64;
        for (pid, p) in &state.points {
            let dev = (state_r.points[pid] - r.rotate(p)).norm() / (1.0 + p.norm());
            worst = worst.max(dev);
        }
        assert!(worst < 1e-9, "worst relative point deviation {worst:.3e}");
        for (key, lambda) in &state.depths {
            let dev = (state_r.depths[key] - lambda).abs() / (1.0 + lambda.abs());
            assert!(dev < 1e-9, "depth deviation {dev:.3e}");
        }
    }
}
