//! Observation-to-observation baseline initializer.
//!
//! Pairs of observations of the same point are subtracted, cancelling the
//! unknown point and leaving the per-observation ray lengths as unknowns.
//! The resulting system has 6 (or 9) dense state columns plus one column per
//! observation and is solved as a general sparse least-squares problem via
//! normal equations and a sparse Cholesky factorization; no
//! structure-specific elimination is attempted. Points are recovered by
//! averaging the per-observation back-projections of each track.
//!
//! By default every observation of a track is paired against the track's
//! first observation; the all-pairs variant is available behind
//! [`SolverOptions::all_pairs`] for equivalence studies.

use std::collections::BTreeMap;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::SVector;

use crate::error::{Error, Result};
use crate::geometry::{gravity_rotation, FeatureTrack, Mat3, RigCalibration, Rotation, Vec3};
use crate::p2o::{camera_position, rows_for_tracks, Diagnostics, InitState, RowData, SolverOptions};
use crate::preintegration::PreintegralTable;

/// Pairing strategy of the baseline system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Each observation paired against the track's first observation.
    Star,
    /// Every observation pair of a track.
    AllPairs,
}

/// One 3-row block of the paired system: the difference of two model rows of
/// the same track.
#[derive(Clone, Debug)]
pub struct PairBlock {
    pub track: usize,
    /// Observation index subtracted from `other`.
    pub base: usize,
    pub other: usize,
    pub dt: f64,
    /// Difference of the half-squared times.
    pub ds: f64,
    pub db: Mat3,
    pub q_other: Vec3,
    pub q_base: Vec3,
    pub rhs: Vec3,
}

/// Sparse paired system over `[state | ray lengths]`.
pub struct PairedSystem {
    pub blocks: Vec<PairBlock>,
    /// Column order of the ray-length unknowns.
    pub lambda_index: Vec<(u64, usize)>,
    pub lambda_of: BTreeMap<(usize, usize), usize>,
    pub pairing: Pairing,
    /// 6 or 9 state columns.
    pub state_dim: usize,
    pub dropped_tracks: usize,
}

/// Builds the paired system from per-track model rows.
pub fn build_paired_system(
    rows_per_track: &[(u64, Vec<RowData>)],
    options: &SolverOptions,
) -> Result<PairedSystem> {
    let pairing = if options.all_pairs {
        Pairing::AllPairs
    } else {
        Pairing::Star
    };
    let mut blocks = Vec::new();
    let mut lambda_index = Vec::new();
    let mut lambda_of = BTreeMap::new();
    let mut dropped = 0usize;
    for (track_idx, (point_id, rows)) in rows_per_track.iter().enumerate() {
        if rows.len() < options.min_observations_per_track.max(2) {
            dropped += 1;
            continue;
        }
        for obs in 0..rows.len() {
            lambda_of.insert((track_idx, obs), lambda_index.len());
            lambda_index.push((*point_id, obs));
        }
        let mut push_pair = |base: usize, other: usize| {
            let rb = &rows[base];
            let ro = &rows[other];
            blocks.push(PairBlock {
                track: track_idx,
                base,
                other,
                dt: ro.t - rb.t,
                ds: 0.5 * (ro.t * ro.t - rb.t * rb.t),
                db: ro.b - rb.b,
                q_other: ro.q,
                q_base: rb.q,
                rhs: ro.c - rb.c,
            });
        };
        match pairing {
            Pairing::Star => {
                for other in 1..rows.len() {
                    push_pair(0, other);
                }
            }
            Pairing::AllPairs => {
                for base in 0..rows.len() {
                    for other in base + 1..rows.len() {
                        push_pair(base, other);
                    }
                }
            }
        }
    }
    if blocks.is_empty() {
        return Err(Error::InsufficientParallax);
    }
    Ok(PairedSystem {
        blocks,
        lambda_index,
        lambda_of,
        pairing,
        state_dim: if options.estimate_accel_bias { 9 } else { 6 },
        dropped_tracks: dropped,
    })
}

/// State coefficient columns of one block: `[dt I | ds I | dB]`.
fn state_columns(block: &PairBlock, dim: usize) -> Vec<Vec3> {
    let mut cols = Vec::with_capacity(dim);
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = block.dt;
        cols.push(e);
    }
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = block.ds;
        cols.push(e);
    }
    if dim == 9 {
        for i in 0..3 {
            cols.push(block.db.column(i).into_owned());
        }
    }
    cols
}

/// Accumulated normal equations of the sparse system, kept as triplets plus
/// a dense right-hand side.
struct NormalEquations {
    n: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
    rhs: Vec<f64>,
}

fn assemble_normal_equations(
    system: &PairedSystem,
    dim: usize,
    gravity_tangent: Option<(Vec3, Vec3, Vec3)>,
) -> NormalEquations {
    // With the gravity direction parameterized on its tangent plane the
    // three gravity columns collapse to two.
    let state_cols = if gravity_tangent.is_some() { dim - 1 } else { dim };
    let n = state_cols + system.lambda_index.len();
    let mut zz = vec![0.0; state_cols * state_cols];
    let mut zr = vec![0.0; state_cols];
    let mut lam_diag = vec![0.0; system.lambda_index.len()];
    let mut lam_rhs = vec![0.0; system.lambda_index.len()];
    let mut zl: Vec<Vec<f64>> = vec![vec![0.0; state_cols]; system.lambda_index.len()];
    let mut offdiag: BTreeMap<(usize, usize), f64> = BTreeMap::new();

    for block in &system.blocks {
        let mut cols = state_columns(block, dim);
        let mut rhs = block.rhs;
        if let Some((g_anchor, e1, e2)) = gravity_tangent {
            // Shift the known gravity component into the right-hand side and
            // keep only the two tangent directions.
            rhs -= g_anchor * block.ds;
            cols[3] = e1 * block.ds;
            cols[4] = e2 * block.ds;
            cols.remove(5);
        }
        let li = system.lambda_of[&(block.track, block.other)];
        let lb = system.lambda_of[&(block.track, block.base)];
        // State-state and state-rhs products.
        for (a, ca) in cols.iter().enumerate() {
            for (b, cb) in cols.iter().enumerate().skip(a) {
                let v = ca.dot(cb);
                zz[a * state_cols + b] += v;
                if a != b {
                    zz[b * state_cols + a] += v;
                }
            }
            zr[a] += ca.dot(&rhs);
            zl[li][a] += ca.dot(&block.q_other);
            zl[lb][a] -= ca.dot(&block.q_base);
        }
        // Ray-length columns: +q_other and -q_base, both unit norm.
        lam_diag[li] += 1.0;
        lam_diag[lb] += 1.0;
        *offdiag.entry((li.min(lb), li.max(lb))).or_default() -=
            block.q_other.dot(&block.q_base);
        lam_rhs[li] += block.q_other.dot(&rhs);
        lam_rhs[lb] -= block.q_base.dot(&rhs);
    }

    let mut triplets = Vec::with_capacity(
        state_cols * state_cols + 2 * state_cols * system.lambda_index.len() + 3 * offdiag.len(),
    );
    for a in 0..state_cols {
        for b in 0..state_cols {
            triplets.push(Triplet::new(a, b, zz[a * state_cols + b]));
        }
    }
    for (l, col) in zl.iter().enumerate() {
        for (a, &v) in col.iter().enumerate() {
            if v != 0.0 {
                triplets.push(Triplet::new(a, state_cols + l, v));
                triplets.push(Triplet::new(state_cols + l, a, v));
            }
        }
    }
    for (l, &v) in lam_diag.iter().enumerate() {
        triplets.push(Triplet::new(state_cols + l, state_cols + l, v));
    }
    for (&(a, b), &v) in &offdiag {
        triplets.push(Triplet::new(state_cols + a, state_cols + b, v));
        triplets.push(Triplet::new(state_cols + b, state_cols + a, v));
    }
    let mut rhs = vec![0.0; n];
    rhs[..state_cols].copy_from_slice(&zr);
    rhs[state_cols..].copy_from_slice(&lam_rhs);
    NormalEquations { n, triplets, rhs }
}

fn sparse_solve(normal: &NormalEquations) -> Result<(Vec<f64>, f64)> {
    let mat = SparseColMat::try_new_from_triplets(normal.n, normal.n, &normal.triplets)
        .map_err(|e| Error::Parse(format!("sparse assembly: {e:?}")))?;
    // Crude conditioning estimate from the diagonal spread.
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for t in &normal.triplets {
        if t.row == t.col {
            dmin = dmin.min(t.val.abs());
            dmax = dmax.max(t.val.abs());
        }
    }
    let cond_estimate = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    let llt = mat
        .sp_cholesky(faer::Side::Lower)
        .map_err(|_| Error::IllConditioned {
            condition: cond_estimate,
        })?;
    let b = faer::Mat::from_fn(normal.n, 1, |i, _| normal.rhs[i]);
    let x = llt.solve(&b);
    Ok(((0..normal.n).map(|i| x[(i, 0)]).collect(), cond_estimate))
}

/// Solves the paired system from precomputed preintegrals (the timed region
/// of the benchmarks).
pub fn solve_o2o_with_table(
    tracks: &[FeatureTrack],
    table: &PreintegralTable,
    calib: &RigCalibration,
    options: &SolverOptions,
) -> Result<InitState> {
    let rows = rows_for_tracks(tracks, table, calib)?;
    let system = build_paired_system(&rows, options)?;
    let dim = system.state_dim;

    let normal = assemble_normal_equations(&system, dim, None);
    let (x, cond) = sparse_solve(&normal)?;
    let mut z9 = SVector::<f64, 9>::zeros();
    for i in 0..dim {
        z9[i] = x[i];
    }
    let mut lambdas: Vec<f64> = x[dim..].to_vec();

    if options.enforce_gravity_norm {
        let g = Vec3::new(z9[3], z9[4], z9[5]);
        if g.norm() > 1e-12 {
            let ghat = g.normalize();
            let pick = if ghat.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let e1 = (pick - ghat * ghat.dot(&pick)).normalize();
            let e2 = ghat.cross(&e1);
            let anchor = ghat * options.gamma;
            let normal_c = assemble_normal_equations(&system, dim, Some((anchor, e1, e2)));
            if let Ok((xc, _)) = sparse_solve(&normal_c) {
                let g_new = (anchor + e1 * xc[3] + e2 * xc[4]).normalize() * options.gamma;
                z9[0] = xc[0];
                z9[1] = xc[1];
                z9[2] = xc[2];
                z9[3] = g_new.x;
                z9[4] = g_new.y;
                z9[5] = g_new.z;
                for i in 6..dim {
                    z9[i] = xc[i - 1];
                }
                lambdas = xc[dim - 1..].to_vec();
            }
        }
    }

    // Points: average the ray-length back-projections per track; record the
    // spread as a diagnostic of internal consistency.
    let mut points = BTreeMap::new();
    let mut depths = BTreeMap::new();
    let mut negative = 0usize;
    let mut spread_sum = 0.0;
    let mut spread_tracks = 0usize;
    for (track_idx, (point_id, track_rows)) in rows.iter().enumerate() {
        if !system.lambda_of.contains_key(&(track_idx, 0)) {
            continue;
        }
        let mut candidates = Vec::with_capacity(track_rows.len());
        for (obs, row) in track_rows.iter().enumerate() {
            let lambda = lambdas[system.lambda_of[&(track_idx, obs)]];
            if lambda < 0.0 {
                negative += 1;
            }
            depths.insert((*point_id, obs), lambda);
            candidates.push(camera_position(row, &z9) + row.q * lambda);
        }
        let mean = candidates.iter().sum::<Vec3>() / candidates.len() as f64;
        let var = candidates
            .iter()
            .map(|c| (c - mean).norm_squared())
            .sum::<f64>()
            / candidates.len() as f64;
        spread_sum += var.sqrt();
        spread_tracks += 1;
        points.insert(*point_id, mean);
    }

    let v0 = Vec3::new(z9[0], z9[1], z9[2]);
    let g0 = Vec3::new(z9[3], z9[4], z9[5]);
    let b_a = Vec3::new(z9[6], z9[7], z9[8]);
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
            lambda_spread: if spread_tracks > 0 {
                spread_sum / spread_tracks as f64
            } else {
                0.0
            },
        },
    })
}

/// Full baseline solve: preintegration plus the sparse paired system.
pub fn solve_o2o(
    tracks: &[FeatureTrack],
    window: &crate::preintegration::ImuWindow,
    calib: &RigCalibration,
    options: &SolverOptions,
) -> Result<InitState> {
    calib.validate()?;
    for track in tracks {
        track.validate()?;
    }
    let times = crate::p2o::observation_times(tracks);
    let table = PreintegralTable::build(window, &times, &Vec3::zeros())?;
    solve_o2o_with_table(tracks, &table, calib, options)
}
