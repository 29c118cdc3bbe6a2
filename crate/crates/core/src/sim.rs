//! Synthetic trajectory, IMU and feature-track generator with exact ground
//! truth.
//!
//! Trajectories are analytic (twice-differentiable position, closed-form
//! body rates). Ground truth, however, is defined by the *discrete*
//! zero-order-hold integration of the sampled signals: the same recursion the
//! preintegrator unrolls. Observations are generated from the discrete poses,
//! so at zero noise every generated observation closes the linear model to
//! floating-point accuracy. The analytic trajectory only shapes the signals.
//!
//! Accelerometer convention: the sensor measures specific force,
//! `s = R^T (a - g)` with `g = [0, 0, gamma]` in the global frame (gravity
//! points along +z). A resting sensor therefore reads `-R^T g`, and a
//! free-falling one reads zero. Injected biases and noise are *added* to the
//! measurements.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    CameraCalibration, FeatureTrack, Intrinsics, Observation, RigCalibration, Rotation, Vec2,
    Vec3, STANDARD_GRAVITY,
};
use crate::preintegration::{ImuSample, ImuWindow};

/// Matching tolerance for timestamps, seconds.
const TIME_EPS: f64 = 1e-12;

/// Gravity in the global simulation frame; +z points "down".
pub fn gravity_world() -> Vec3 {
    Vec3::new(0.0, 0.0, STANDARD_GRAVITY)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Rig at rest.
    Static,
    /// Forward walk with gait bob and gentle looking around.
    WalkForward,
    /// Stationary position, oscillating orientation about two axes.
    HeadMoving,
    /// Faster forward motion with pronounced bob.
    Running,
    /// Ballistic validation trajectory: acceleration equals gravity.
    FreeFall,
}

/// Procedural trajectory parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Sequence duration, seconds.
    pub duration: f64,
    /// Cruise speed, m/s.
    #[serde(default)]
    pub speed: f64,
    /// Peak angular rate of the look-around oscillation, rad/s.
    #[serde(default)]
    pub turn_rate: f64,
    /// Vertical gait-bob amplitude, meters.
    #[serde(default)]
    pub bob_amplitude: f64,
    /// Gait-bob frequency, Hz.
    #[serde(default)]
    pub bob_frequency: f64,
}

impl TrajectorySpec {
    /// Spec with per-kind default motion parameters.
    pub fn new(kind: TrajectoryKind, duration: f64) -> Self {
        let (speed, turn_rate, bob_amplitude, bob_frequency) = match kind {
            TrajectoryKind::Static => (0.0, 0.0, 0.0, 0.0),
            TrajectoryKind::WalkForward => (1.0, 0.6, 0.02, 2.0),
            TrajectoryKind::HeadMoving => (0.0, 1.5, 0.05, 1.0),
            TrajectoryKind::Running => (2.5, 0.8, 0.05, 3.0),
            TrajectoryKind::FreeFall => (0.5, 0.0, 0.0, 0.0),
        };
        TrajectorySpec {
            kind,
            duration,
            speed,
            turn_rate,
            bob_amplitude,
            bob_frequency,
        }
    }
}

/// Duration of the speed ramp-up at the start of walking/running, seconds.
const RAMP: f64 = 1.0;

/// Base orientation of the IMU in the global frame: camera/IMU z looks along
/// global +x (forward), y points down (along +z), x completes the
/// right-handed set.
fn base_orientation() -> Rotation {
    Rotation::nearest(crate::geometry::Mat3::from_columns(&[
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(1.0, 0.0, 0.0),
    ]))
}

/// Forward distance/velocity/acceleration of the ramped cruise profile
/// `v(t) = speed sin^2(pi t / (2 RAMP))` for `t < RAMP`, constant after.
fn ramped_forward(speed: f64, t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t < RAMP {
        let dist = speed * (t / 2.0 - (RAMP / (2.0 * PI)) * (PI * t / RAMP).sin());
        let v = speed * (0.5 * PI * t / RAMP).sin().powi(2);
        let a = speed * (0.5 * PI / RAMP) * (PI * t / RAMP).sin();
        (dist, v, a)
    } else {
        (speed * RAMP / 2.0 + speed * (t - RAMP), speed, 0.0)
    }
}

struct Oscillation {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Oscillation {
    fn value(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
    fn rate(&self, t: f64) -> f64 {
        self.amplitude * self.omega * (self.omega * t + self.phase).cos()
    }
    fn accel(&self, t: f64) -> f64 {
        -self.amplitude * self.omega * self.omega * (self.omega * t + self.phase).sin()
    }
}

/// Analytic evaluation of a trajectory spec in the global frame.
pub struct Trajectory {
    spec: TrajectorySpec,
    base: Rotation,
    bob: Oscillation,
    sway: Oscillation,
    pan: Oscillation,
    tilt: Oscillation,
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Self {
        let f_bob = if spec.bob_frequency > 0.0 {
            spec.bob_frequency
        } else {
            1.0
        };
        let (pan_hz, tilt_hz, tilt_scale) = match spec.kind {
            TrajectoryKind::HeadMoving => (0.4, 0.7, 0.6),
            TrajectoryKind::Running => (0.5, 1.0, 0.5),
            _ => (0.3, 0.5, 0.5),
        };
        let pan_omega = 2.0 * PI * pan_hz;
        let tilt_omega = 2.0 * PI * tilt_hz;
        Trajectory {
            spec: *spec,
            base: base_orientation(),
            bob: Oscillation {
                amplitude: spec.bob_amplitude,
                omega: 2.0 * PI * f_bob,
                phase: 0.0,
            },
            sway: Oscillation {
                amplitude: 0.5 * spec.bob_amplitude,
                omega: 2.0 * PI * f_bob,
                phase: 0.5 * PI,
            },
            pan: Oscillation {
                amplitude: spec.turn_rate / pan_omega,
                omega: pan_omega,
                phase: 0.0,
            },
            tilt: Oscillation {
                amplitude: tilt_scale * spec.turn_rate / tilt_omega,
                omega: tilt_omega,
                phase: 1.1,
            },
        }
    }

    pub fn position(&self, t: f64) -> Vec3 {
        match self.spec.kind {
            TrajectoryKind::Static => Vec3::zeros(),
            TrajectoryKind::FreeFall => {
                Vec3::new(self.spec.speed * t, 0.0, 0.5 * STANDARD_GRAVITY * t * t)
            }
            TrajectoryKind::HeadMoving => {
                Vec3::new(0.3 * self.sway.value(t), 0.0, self.bob.value(t))
            }
            TrajectoryKind::WalkForward | TrajectoryKind::Running => {
                let (d, _, _) = ramped_forward(self.spec.speed, t);
                Vec3::new(d, self.sway.value(t), self.bob.value(t))
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        match self.spec.kind {
            TrajectoryKind::Static => Vec3::zeros(),
            TrajectoryKind::FreeFall => Vec3::new(self.spec.speed, 0.0, STANDARD_GRAVITY * t),
            TrajectoryKind::HeadMoving => {
                Vec3::new(0.3 * self.sway.rate(t), 0.0, self.bob.rate(t))
            }
            TrajectoryKind::WalkForward | TrajectoryKind::Running => {
                let (_, v, _) = ramped_forward(self.spec.speed, t);
                Vec3::new(v, self.sway.rate(t), self.bob.rate(t))
            }
        }
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        match self.spec.kind {
            TrajectoryKind::Static => Vec3::zeros(),
            TrajectoryKind::FreeFall => gravity_world(),
            TrajectoryKind::HeadMoving => {
                Vec3::new(0.3 * self.sway.accel(t), 0.0, self.bob.accel(t))
            }
            TrajectoryKind::WalkForward | TrajectoryKind::Running => {
                let (_, _, a) = ramped_forward(self.spec.speed, t);
                Vec3::new(a, self.sway.accel(t), self.bob.accel(t))
            }
        }
    }

    /// Orientation of the IMU frame in the global frame.
    pub fn orientation(&self, t: f64) -> Rotation {
        if matches!(
            self.spec.kind,
            TrajectoryKind::Static | TrajectoryKind::FreeFall
        ) {
            return self.base;
        }
        let pan = Rotation::exp(&(Vec3::y() * self.pan.value(t)));
        let tilt = Rotation::exp(&(Vec3::x() * self.tilt.value(t)));
        self.base * pan * tilt
    }

    /// Angular rate in the IMU frame. For `R = R0 exp(pan e_y) exp(tilt e_x)`
    /// the body rate composes as `tilt' e_x + exp(-tilt e_x)(pan' e_y)`.
    pub fn body_rate(&self, t: f64) -> Vec3 {
        if matches!(
            self.spec.kind,
            TrajectoryKind::Static | TrajectoryKind::FreeFall
        ) {
            return Vec3::zeros();
        }
        let tilt = Rotation::exp(&(Vec3::x() * self.tilt.value(t)));
        tilt.rotate_back(&(Vec3::y() * self.pan.rate(t))) + Vec3::x() * self.tilt.rate(t)
    }
}

/// Noise and bias injection parameters. Seeded runs are bit-reproducible.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Pixel tracking noise, 1-sigma per axis.
    #[serde(default)]
    pub pixel_sigma: f64,
    /// Gyro white-noise density, rad/s/sqrt(Hz).
    #[serde(default)]
    pub gyro_noise_density: f64,
    /// Accelerometer white-noise density, m/s^2/sqrt(Hz).
    #[serde(default)]
    pub accel_noise_density: f64,
    /// Constant gyro bias added to measurements, rad/s.
    #[serde(default = "zero3")]
    pub gyro_bias: [f64; 3],
    /// Constant accelerometer bias added to measurements, m/s^2.
    #[serde(default = "zero3")]
    pub accel_bias: [f64; 3],
    pub seed: u64,
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        NoiseSpec {
            pixel_sigma: 0.0,
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
            seed,
        }
    }

    pub fn with_pixel_sigma(seed: u64, sigma: f64) -> Self {
        NoiseSpec {
            pixel_sigma: sigma,
            ..NoiseSpec::noiseless(seed)
        }
    }

    pub fn gyro_bias_vec(&self) -> Vec3 {
        Vec3::from_row_slice(&self.gyro_bias)
    }

    pub fn accel_bias_vec(&self) -> Vec3 {
        Vec3::from_row_slice(&self.accel_bias)
    }
}

/// Discrete ground-truth states at every IMU sample time, global frame.
pub struct ImuTruth {
    pub imu_period: f64,
    /// Clean (noise- and bias-free) samples the truth is integrated from.
    pub clean: Vec<ImuSample>,
    pub rotations: Vec<Rotation>,
    pub velocities: Vec<Vec3>,
    pub positions: Vec<Vec3>,
}

impl ImuTruth {
    /// Pose and velocity at an arbitrary time within the sampled range,
    /// continued with the same zero-order-hold model between samples.
    pub fn state_at(&self, t: f64) -> (Rotation, Vec3, Vec3) {
        let idx = self
            .clean
            .partition_point(|s| s.time <= t + TIME_EPS)
            .saturating_sub(1);
        let s = &self.clean[idx];
        let delta = (t - s.time).max(0.0);
        let r = self.rotations[idx];
        let a = gravity_world() + r.rotate(&s.accel);
        let pos = self.positions[idx] + self.velocities[idx] * delta + a * (0.5 * delta * delta);
        let vel = self.velocities[idx] + a * delta;
        let rot = if delta > TIME_EPS {
            r * Rotation::exp(&(s.gyro * delta))
        } else {
            r
        };
        (rot, pos, vel)
    }
}

/// Samples the IMU along a trajectory. Returns the (possibly noisy) window
/// the estimator sees plus the discrete ground truth integrated from the
/// clean samples.
pub fn sample_imu(
    traj: &TrajectorySpec,
    rate: f64,
    noise: &NoiseSpec,
) -> Result<(ImuWindow, ImuTruth)> {
    let n = (traj.duration * rate).round() as usize;
    if n < 2 {
        return Err(Error::Argument(
            "trajectory too short for the IMU rate".into(),
        ));
    }
    let ts = 1.0 / rate;
    let truth = sample_imu_clean(traj, rate, n);
    let window = add_imu_noise(&truth, ts, noise, &mut rng_for(noise.seed, 0xA001))?;
    Ok((window, truth))
}

fn sample_imu_clean(traj: &TrajectorySpec, rate: f64, n: usize) -> ImuTruth {
    let ts = 1.0 / rate;
    let trajectory = Trajectory::new(traj);
    let g = gravity_world();
    let mut clean = Vec::with_capacity(n + 1);
    let mut rotations = Vec::with_capacity(n + 1);
    let mut velocities = Vec::with_capacity(n + 1);
    let mut positions = Vec::with_capacity(n + 1);

    let mut rot = trajectory.orientation(0.0);
    let mut vel = trajectory.velocity(0.0);
    let mut pos = trajectory.position(0.0);
    for k in 0..=n {
        let t = k as f64 * ts;
        // Specific force from the analytic acceleration, expressed in the
        // *discrete* attitude: the sensor is strapped to the discrete body.
        let accel_body = rot.rotate_back(&(trajectory.acceleration(t) - g));
        let gyro = trajectory.body_rate(t);
        clean.push(ImuSample {
            time: t,
            gyro,
            accel: accel_body,
        });
        rotations.push(rot);
        velocities.push(vel);
        positions.push(pos);
        // Advance the discrete recursion past sample k.
        let a = g + rot.rotate(&accel_body);
        pos += vel * ts + a * (0.5 * ts * ts);
        vel += a * ts;
        rot = rot * Rotation::exp(&(gyro * ts));
    }
    ImuTruth {
        imu_period: ts,
        clean,
        rotations,
        velocities,
        positions,
    }
}

fn add_imu_noise(
    truth: &ImuTruth,
    ts: f64,
    noise: &NoiseSpec,
    rng: &mut ChaCha12Rng,
) -> Result<ImuWindow> {
    let rate = 1.0 / ts;
    let sigma_g = noise.gyro_noise_density * rate.sqrt();
    let sigma_a = noise.accel_noise_density * rate.sqrt();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let b_g = noise.gyro_bias_vec();
    let b_a = noise.accel_bias_vec();
    let samples = truth
        .clean
        .iter()
        .map(|s| {
            let ng =
                Vec3::new(gauss.sample(rng), gauss.sample(rng), gauss.sample(rng)) * sigma_g;
            let na =
                Vec3::new(gauss.sample(rng), gauss.sample(rng), gauss.sample(rng)) * sigma_a;
            ImuSample {
                time: s.time,
                gyro: s.gyro + b_g + ng,
                accel: s.accel + b_a + na,
            }
        })
        .collect();
    ImuWindow::new(samples, ts)
}

/// Back-projects `count` evenly spaced image points of the reference camera
/// pose with seeded random depths (ray lengths). A single point lands on the
/// image center at mid-range depth.
pub fn generate_points(
    ref_pose: (Rotation, Vec3),
    count: usize,
    depth_range: (f64, f64),
    intrinsics: &Intrinsics,
    image_height: u32,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec3> {
    let (r_c, p_c) = ref_pose;
    let width = (2.0 * intrinsics.cx + 1.0).round();
    let height = image_height as f64;
    if count == 1 {
        let mid = 0.5 * (depth_range.0 + depth_range.1);
        let ray = intrinsics.back_project(&Vec2::new(intrinsics.cx, intrinsics.cy));
        return vec![p_c + r_c.rotate(&ray) * mid];
    }
    let margin = 40.0;
    let aspect = (width - 2.0 * margin) / (height - 2.0 * margin);
    let cols = ((count as f64 * aspect).sqrt().round() as usize).max(1);
    let rows = count.div_ceil(cols);
    let mut points = Vec::with_capacity(count);
    'outer: for row in 0..rows {
        for col in 0..cols {
            if points.len() == count {
                break 'outer;
            }
            let u = margin + (width - 2.0 * margin) * (col as f64 + 0.5) / cols as f64;
            let v = margin + (height - 2.0 * margin) * (row as f64 + 0.5) / rows as f64;
            let depth = rng.gen_range(depth_range.0..depth_range.1);
            let ray = intrinsics.back_project(&Vec2::new(u, v));
            points.push(p_c + r_c.rotate(&ray) * depth);
        }
    }
    points
}

/// Scene description consumed by the sequence builder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    /// `true` enables the rolling shutter of the default rig.
    #[serde(default)]
    pub rolling_shutter: bool,
    /// `false` drops the second camera of the default rig.
    #[serde(default = "default_true")]
    pub stereo: bool,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default = "default_depth_range")]
    pub depth_range: (f64, f64),
    #[serde(default = "default_n_frames")]
    pub n_frames: usize,
    /// Frame downsampling factor between the frames of a window.
    #[serde(default = "default_downsample")]
    pub downsample: usize,
    #[serde(default = "default_min_speed")]
    pub min_speed: f64,
}

fn default_true() -> bool {
    true
}
fn default_imu_rate() -> f64 {
    800.0
}
fn default_frame_rate() -> f64 {
    30.0
}
fn default_points() -> usize {
    100
}
fn default_depth_range() -> (f64, f64) {
    (1.0, 15.0)
}
fn default_n_frames() -> usize {
    5
}
fn default_downsample() -> usize {
    3
}
fn default_min_speed() -> f64 {
    0.01
}

impl SceneSpec {
    pub fn new(trajectory: TrajectorySpec, noise: NoiseSpec) -> Self {
        SceneSpec {
            trajectory,
            noise,
            rolling_shutter: false,
            stereo: true,
            imu_rate: default_imu_rate(),
            frame_rate: default_frame_rate(),
            n_points: default_points(),
            depth_range: default_depth_range(),
            n_frames: default_n_frames(),
            downsample: default_downsample(),
            min_speed: default_min_speed(),
        }
    }

    pub fn rig(&self) -> RigCalibration {
        default_rig(self.stereo, self.rolling_shutter, self.imu_rate)
    }
}

/// VGA rig with a 6 cm stereo baseline along the IMU x-axis. The rolling
/// shutter reads one VGA frame in 10 ms.
pub fn default_rig(stereo: bool, rolling_shutter: bool, imu_rate: f64) -> RigCalibration {
    let intrinsics = Intrinsics {
        fx: 460.0,
        fy: 460.0,
        cx: 319.5,
        cy: 239.5,
    };
    let row_readout = if rolling_shutter { 0.010 / 480.0 } else { 0.0 };
    let cam = |x: f64| CameraCalibration {
        r_c_i: Rotation::identity(),
        p_c_i: Vec3::new(x, 0.0, 0.0),
        intrinsics,
        image_height: 480,
        row_readout,
    };
    let cameras = if stereo {
        vec![cam(-0.03), cam(0.03)]
    } else {
        vec![cam(0.0)]
    };
    RigCalibration {
        cameras,
        imu_period: 1.0 / imu_rate,
    }
}

/// A full simulated sequence: clean ground truth plus the frame schedule.
pub struct Sequence {
    pub spec: SceneSpec,
    pub rig: RigCalibration,
    pub truth: ImuTruth,
    /// Start-of-exposure times of every frame, global time.
    pub frame_times: Vec<f64>,
}

/// One evaluation window: the selected frames and the anchoring IMU sample.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub index: usize,
    pub frames: Vec<usize>,
    /// Index of the IMU sample that defines the RCS.
    pub anchor_sample: usize,
    /// Global time of the anchor sample.
    pub t0: f64,
}

/// Ground truth of one realized window, expressed in its RCS.
pub struct WindowTruth {
    pub v0: Vec3,
    pub g0: Vec3,
    pub points: BTreeMap<u64, Vec3>,
    /// True ray lengths per (point, observation index).
    pub lambdas: BTreeMap<(u64, usize), f64>,
    /// IMU pose at each selected frame start.
    pub frame_poses: Vec<(f64, Rotation, Vec3)>,
    /// Camera pose per observation, for closure checks.
    pub cam_poses: BTreeMap<(u64, usize), (Rotation, Vec3)>,
    /// Biases injected into this realization's measurements.
    pub injected_gyro_bias: Vec3,
    pub injected_accel_bias: Vec3,
}

/// A realized window: what the estimator sees plus the matching truth.
pub struct SimulatedWindow {
    pub window: ImuWindow,
    pub tracks: Vec<FeatureTrack>,
    pub truth: WindowTruth,
    /// Window-local start-of-exposure times of the selected frames.
    pub frame_times: Vec<f64>,
}

impl SimulatedWindow {
    /// Integration time: first to last observation.
    pub fn integration_time(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for track in &self.tracks {
            for obs in &track.observations {
                lo = lo.min(obs.time);
                hi = hi.max(obs.time);
            }
        }
        (hi - lo).max(0.0)
    }

    /// The same tracks with every observation timestamp snapped back to its
    /// frame start, discarding the rolling-shutter row offsets.
    pub fn tracks_with_frame_start_times(&self) -> Vec<FeatureTrack> {
        let mut out = self.tracks.clone();
        for track in &mut out {
            for obs in &mut track.observations {
                let frame = self
                    .frame_times
                    .iter()
                    .copied()
                    .filter(|&f| f <= obs.time + TIME_EPS)
                    .fold(0.0f64, f64::max);
                obs.time = frame;
            }
            track
                .observations
                .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.camera.cmp(&b.camera)));
        }
        out
    }
}

/// Builds the clean sequence (IMU truth and frame schedule).
pub fn build_sequence(spec: &SceneSpec) -> Result<Sequence> {
    let rig = spec.rig();
    rig.validate()?;
    let n = (spec.trajectory.duration * spec.imu_rate).round() as usize;
    if n < 2 {
        return Err(Error::Argument("trajectory too short".into()));
    }
    let truth = sample_imu_clean(&spec.trajectory, spec.imu_rate, n);
    let readout: f64 = rig
        .cameras
        .iter()
        .map(|c| c.row_readout * c.image_height as f64)
        .fold(0.0, f64::max);
    let n_frames = ((spec.trajectory.duration - readout - 2.0 / spec.imu_rate)
        * spec.frame_rate)
        .floor() as usize;
    if n_frames == 0 {
        return Err(Error::Argument("trajectory too short for one frame".into()));
    }
    let frame_times = (0..n_frames).map(|f| f as f64 / spec.frame_rate).collect();
    Ok(Sequence {
        spec: spec.clone(),
        rig,
        truth,
        frame_times,
    })
}

/// Selects sliding evaluation windows of `n_frames` frames spaced
/// `downsample` apart, dropping windows whose ground-truth speed at the
/// anchor is below `min_speed`.
pub fn window_select(
    seq: &Sequence,
    n_frames: usize,
    downsample: usize,
    min_speed: f64,
) -> Result<Vec<WindowPlan>> {
    if n_frames < 2 || downsample == 0 {
        return Err(Error::Argument(
            "window selection needs n_frames >= 2 and downsample >= 1".into(),
        ));
    }
    let span = (n_frames - 1) * downsample;
    let ts = seq.truth.imu_period;
    let mut plans = Vec::new();
    let mut first = 0;
    while first + span < seq.frame_times.len() {
        let t_first = seq.frame_times[first];
        let anchor = (t_first / ts + TIME_EPS).floor() as usize;
        if anchor >= seq.truth.velocities.len() {
            break;
        }
        if seq.truth.velocities[anchor].norm() >= min_speed {
            plans.push(WindowPlan {
                index: plans.len(),
                frames: (0..n_frames).map(|i| first + i * downsample).collect(),
                anchor_sample: anchor,
                t0: anchor as f64 * ts,
            });
        }
        first += 1;
    }
    if plans.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(plans)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(seed ^ splitmix(salt)))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Generates the observations of one camera frame from discrete ground
/// truth. Rolling-shutter times are solved by fixed-point iteration; pixel
/// noise is added after the time is assigned and rays are re-normalized from
/// the noisy pixels.
#[allow(clippy::too_many_arguments)]
fn observe_frame(
    truth: &ImuTruth,
    cam: &CameraCalibration,
    cam_index: usize,
    frame_time: f64,
    points: &[Vec3],
    pixel_sigma: f64,
    rng: &mut ChaCha12Rng,
    out: &mut Vec<(usize, Observation, f64, (Rotation, Vec3))>,
) {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let width = (2.0 * cam.intrinsics.cx + 1.0).round();
    let height = cam.image_height as f64;
    for (pid, m) in points.iter().enumerate() {
        // Self-consistent rolling-shutter timestamp: the row of the
        // projection determines the time, which determines the pose.
        let mut t = frame_time;
        let mut visible = true;
        if cam.row_readout > 0.0 {
            for _ in 0..5 {
                let (r_i, p_i, _) = truth.state_at(t);
                let r_c = r_i * cam.r_c_i;
                let p_c = p_i + r_i.rotate(&cam.p_c_i);
                let w = r_c.rotate_back(&(m - p_c));
                if w.z <= 0.0 {
                    visible = false;
                    break;
                }
                let Ok(px) = cam.intrinsics.project_pixel(&w) else {
                    visible = false;
                    break;
                };
                let row = px.y.clamp(0.0, cam.image_height as f64 - 1.0);
                let t_new = frame_time + row * cam.row_readout;
                let done = (t_new - t).abs() < 1e-9;
                t = t_new;
                if done {
                    break;
                }
            }
        }
        if !visible {
            continue;
        }
        // Final projection at the converged time keeps the stored pixel,
        // pose and ray length mutually consistent.
        let (r_i, p_i, _) = truth.state_at(t);
        let r_c = r_i * cam.r_c_i;
        let p_c = p_i + r_i.rotate(&cam.p_c_i);
        let w = r_c.rotate_back(&(m - p_c));
        if w.z <= 0.0 {
            continue;
        }
        let Ok(px) = cam.intrinsics.project_pixel(&w) else {
            continue;
        };
        if px.x < 0.0 || px.x >= width || px.y < 0.0 || px.y >= height {
            continue;
        }
        let lambda = (m - p_c).norm();
        let noisy = if pixel_sigma > 0.0 {
            Vec2::new(
                px.x + pixel_sigma * gauss.sample(rng),
                px.y + pixel_sigma * gauss.sample(rng),
            )
        } else {
            px
        };
        let ray = cam.intrinsics.back_project(&noisy);
        out.push((
            pid,
            Observation {
                camera: cam_index,
                pixel: noisy,
                ray,
                time: t,
            },
            lambda,
            (r_c, p_c),
        ));
    }
}

impl Sequence {
    /// Realizes one window: generates its point set, observations and noisy
    /// IMU slice. `realization` indexes the noise redraw; the point set is
    /// shared by all realizations of a window.
    pub fn realize(&self, plan: &WindowPlan, realization: u64) -> Result<SimulatedWindow> {
        let seed = self.spec.noise.seed;
        let mut points_rng = rng_for(seed, splitmix(plan.index as u64) ^ 0xB0B0);
        let mut pixel_rng = rng_for(
            seed,
            splitmix(plan.index as u64 ^ (realization << 20)) ^ 0xC0FE,
        );
        let mut imu_rng = rng_for(
            seed,
            splitmix(plan.index as u64 ^ (realization << 20)) ^ 0x1234,
        );

        // Reference pose: camera 0 at the first selected frame.
        let t_ref = self.frame_times[plan.frames[0]];
        let (r_i, p_i, _) = self.truth.state_at(t_ref);
        let cam0 = &self.rig.cameras[0];
        let ref_pose = (r_i * cam0.r_c_i, p_i + r_i.rotate(&cam0.p_c_i));
        let points_g = generate_points(
            ref_pose,
            self.spec.n_points,
            self.spec.depth_range,
            &cam0.intrinsics,
            cam0.image_height,
            &mut points_rng,
        );

        // Observations in global time.
        let mut raw: Vec<(usize, Observation, f64, (Rotation, Vec3))> = Vec::new();
        for &frame in &plan.frames {
            let tau = self.frame_times[frame];
            for (ci, cam) in self.rig.cameras.iter().enumerate() {
                observe_frame(
                    &self.truth,
                    cam,
                    ci,
                    tau,
                    &points_g,
                    self.spec.noise.pixel_sigma,
                    &mut pixel_rng,
                    &mut raw,
                );
            }
        }

        // Anchor everything to the window RCS.
        let k0 = plan.anchor_sample;
        let r_a = self.truth.rotations[k0];
        let p_a = self.truth.positions[k0];
        let to_rcs_rot = |r: Rotation| r_a.transpose() * r;
        let to_rcs_pos = |p: Vec3| r_a.rotate_back(&(p - p_a));

        let mut per_point: BTreeMap<u64, Vec<(Observation, f64, (Rotation, Vec3))>> =
            BTreeMap::new();
        let mut last_obs_time = plan.t0;
        for (pid, mut obs, lambda, (r_c, p_c)) in raw {
            last_obs_time = last_obs_time.max(obs.time);
            obs.time -= plan.t0;
            per_point.entry(pid as u64).or_default().push((
                obs,
                lambda,
                (to_rcs_rot(r_c), to_rcs_pos(p_c)),
            ));
        }

        let mut tracks = Vec::new();
        let mut lambdas = BTreeMap::new();
        let mut cam_poses = BTreeMap::new();
        let mut points = BTreeMap::new();
        for (pid, mut obs_list) in per_point {
            if obs_list.len() < 2 {
                continue;
            }
            obs_list.sort_by(|a, b| {
                a.0.time
                    .total_cmp(&b.0.time)
                    .then(a.0.camera.cmp(&b.0.camera))
            });
            let mut observations = Vec::with_capacity(obs_list.len());
            for (i, (obs, lambda, pose)) in obs_list.into_iter().enumerate() {
                lambdas.insert((pid, i), lambda);
                cam_poses.insert((pid, i), pose);
                observations.push(obs);
            }
            points.insert(pid, to_rcs_pos(points_g[pid as usize]));
            let track = FeatureTrack {
                point_id: pid,
                observations,
            };
            track.validate()?;
            tracks.push(track);
        }

        // Noisy IMU slice covering the last observation plus margin.
        let ts = self.truth.imu_period;
        let k_end = (((last_obs_time - plan.t0) / ts).ceil() as usize + 2)
            .min(self.truth.clean.len() - 1 - k0)
            + k0;
        let noise = &self.spec.noise;
        let rate = 1.0 / ts;
        let sigma_g = noise.gyro_noise_density * rate.sqrt();
        let sigma_a = noise.accel_noise_density * rate.sqrt();
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let b_g = noise.gyro_bias_vec();
        let b_a = noise.accel_bias_vec();
        let samples: Vec<ImuSample> = (k0..=k_end)
            .map(|k| {
                let s = &self.truth.clean[k];
                let ng = Vec3::new(
                    gauss.sample(&mut imu_rng),
                    gauss.sample(&mut imu_rng),
                    gauss.sample(&mut imu_rng),
                ) * sigma_g;
                let na = Vec3::new(
                    gauss.sample(&mut imu_rng),
                    gauss.sample(&mut imu_rng),
                    gauss.sample(&mut imu_rng),
                ) * sigma_a;
                ImuSample {
                    time: (k - k0) as f64 * ts,
                    gyro: s.gyro + b_g + ng,
                    accel: s.accel + b_a + na,
                }
            })
            .collect();
        let window = ImuWindow::new(samples, ts)?;

        let frame_poses = plan
            .frames
            .iter()
            .map(|&f| {
                let tau = self.frame_times[f];
                let (r, p, _) = self.truth.state_at(tau);
                (tau - plan.t0, to_rcs_rot(r), to_rcs_pos(p))
            })
            .collect();

        Ok(SimulatedWindow {
            window,
            tracks,
            truth: WindowTruth {
                v0: r_a.rotate_back(&self.truth.velocities[k0]),
                g0: r_a.rotate_back(&gravity_world()),
                points,
                lambdas,
                frame_poses,
                cam_poses,
                injected_gyro_bias: b_g,
                injected_accel_bias: b_a,
            },
            frame_times: plan
                .frames
                .iter()
                .map(|&f| self.frame_times[f] - plan.t0)
                .collect(),
        })
    }
}
