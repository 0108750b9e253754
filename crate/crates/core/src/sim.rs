//! Synthetic ground truth, sensor synthesis and the Monte Carlo experiments.
//!
//! Ground truth integrates `dT/dt = T xi(t)^` for an analytic body twist with a
//! fourth-order Magnus step. IMU samples are built so that sample `i` covers
//! `(t_{i-1}, t_i]`: the gyro reading is the interval mean of the angular
//! rate and the accelerometer reading carries the interval-mean body velocity
//! from one interval to the next, so noiseless samples drive the SE(3) model to
//! the truth with second-order global error.

use std::f64::consts::PI;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::eskf::{run_lio, FilterConfig, Scan, ScanResult};
use crate::jointcov::PoseHistory;
use crate::liegroup::{curly_wedge, se3_exp, se3_log, so3_exp, Pose3, Twist6, RENORMALIZE_EVERY};
use crate::metrics::ate_rmse;
use crate::propagation::{
    propagate_batch, propagate_nominal, propagate_se3_with_noise, PropagationModel,
};
use crate::state::{
    boxplus, ErrorState15, ImuNoiseParams, ImuSample, Matrix15, NavState, Vector12, Vector15,
};
use crate::uamc::{ExtrinsicCalib, RawPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Twist equal to the offsets.
    Constant,
    /// `offset + amplitude * sin(2 pi f t + phase)` per axis, phases drawn from the seed.
    Sinusoidal,
    /// Per-axis sinusoids at multiples of `f`:
    /// `v = a_v (sin 2pi f t, cos 4pi f t, sin 6pi f t)`,
    /// `w = a_w (sin 3pi f t, cos 2pi f t, sin 5pi f t)`, plus offsets.
    #[default]
    Aggressive,
}

/// Analytic body-frame twist `(v(t), w(t))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwistProfile {
    pub kind: ProfileKind,
    /// m/s.
    pub linear_amplitude: [f64; 3],
    /// rad/s.
    pub angular_amplitude: [f64; 3],
    /// m/s.
    pub linear_offset: [f64; 3],
    /// rad/s.
    pub angular_offset: [f64; 3],
    /// Hz.
    pub frequency: f64,
    pub seed: u64,
}

impl Default for TwistProfile {
    fn default() -> Self {
        TwistProfile {
            kind: ProfileKind::Aggressive,
            linear_amplitude: [2.0, 1.5, 0.5],
            angular_amplitude: [1.6, 1.2, 1.6],
            linear_offset: [0.0; 3],
            angular_offset: [0.0; 3],
            frequency: 1.0,
            seed: 0,
        }
    }
}

impl TwistProfile {
    pub fn constant(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        TwistProfile {
            kind: ProfileKind::Constant,
            linear_amplitude: [0.0; 3],
            angular_amplitude: [0.0; 3],
            linear_offset: v.into(),
            angular_offset: w.into(),
            frequency: 0.0,
            seed: 0,
        }
    }

    pub fn stationary() -> Self {
        Self::constant(Vector3::zeros(), Vector3::zeros())
    }

    /// Fast circling motion (5 m/s, 1.4 rad/s yaw) with sinusoidal
    /// disturbances on every axis, used by the closed-loop filter simulation.
    pub fn standard_loop() -> Self {
        TwistProfile {
            kind: ProfileKind::Sinusoidal,
            linear_amplitude: [0.8, 0.5, 0.3],
            angular_amplitude: [1.0, 1.0, 1.6],
            linear_offset: [5.0, 0.0, 0.0],
            angular_offset: [0.0, 0.0, 1.4],
            frequency: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .linear_amplitude
            .iter()
            .chain(&self.angular_amplitude)
            .chain(&self.linear_offset)
            .chain(&self.angular_offset)
            .chain(std::iter::once(&self.frequency));
        if all.into_iter().all(|v| v.is_finite()) && self.frequency >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("twist profile {self:?}")))
        }
    }

    fn phases(&self) -> [f64; 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI))
    }

    pub fn twist(&self, t: f64) -> Twist6 {
        let w = 2.0 * PI * self.frequency * t;
        let (lin, ang): ([f64; 3], [f64; 3]) = match self.kind {
            ProfileKind::Constant => ([0.0; 3], [0.0; 3]),
            ProfileKind::Sinusoidal => {
                let ph = self.phases();
                (
                    std::array::from_fn(|k| self.linear_amplitude[k] * (w + ph[k]).sin()),
                    std::array::from_fn(|k| self.angular_amplitude[k] * (w + ph[3 + k]).sin()),
                )
            }
            ProfileKind::Aggressive => {
                let a = self.linear_amplitude;
                let b = self.angular_amplitude;
                (
                    [
                        a[0] * w.sin(),
                        a[1] * (2.0 * w).cos(),
                        a[2] * (3.0 * w).sin(),
                    ],
                    [
                        b[0] * (1.5 * w).sin(),
                        b[1] * w.cos(),
                        b[2] * (2.5 * w).sin(),
                    ],
                )
            }
        };
        Twist6::new(
            Vector3::from(lin) + Vector3::from(self.linear_offset),
            Vector3::from(ang) + Vector3::from(self.angular_offset),
        )
    }
}

/// One fourth-order Magnus step of `dT/dt = T xi(t)^` over `[t, t + h]`.
pub fn magnus_step(profile: &TwistProfile, t: f64, h: f64) -> Pose3 {
    let c = 3f64.sqrt() / 6.0;
    let a1 = profile.twist(t + (0.5 - c) * h).to_vector();
    let a2 = profile.twist(t + (0.5 + c) * h).to_vector();
    let omega = (a1 + a2) * (0.5 * h)
        + curly_wedge(&Twist6::from_vector(&a1)) * a2 * (3f64.sqrt() / 12.0 * h * h);
    se3_exp(&Twist6::from_vector(&omega))
}

/// Dense ground-truth poses on a uniform grid starting at `T(0) = start`.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    profile: TwistProfile,
    dt_gt: f64,
    t_end: f64,
    poses: Vec<Pose3>,
}

pub fn ground_truth_trajectory(
    profile: &TwistProfile,
    t_end: f64,
    dt_gt: f64,
) -> Result<GroundTruth> {
    ground_truth_from(profile, Pose3::identity(), t_end, dt_gt)
}

pub fn ground_truth_from(
    profile: &TwistProfile,
    start: Pose3,
    t_end: f64,
    dt_gt: f64,
) -> Result<GroundTruth> {
    profile.validate()?;
    if !(dt_gt > 0.0 && dt_gt <= 1e-3) {
        return Err(Error::InvalidParameter(format!(
            "dt_gt must be in (0, 1e-3], got {dt_gt}"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "t_end must be positive, got {t_end}"
        )));
    }
    let n = (t_end / dt_gt - 1e-9).ceil() as usize;
    let mut poses = Vec::with_capacity(n + 1);
    let mut pose = start;
    poses.push(pose);
    for k in 0..n {
        pose = pose * magnus_step(profile, k as f64 * dt_gt, dt_gt);
        if (k + 1) % RENORMALIZE_EVERY == 0 {
            pose = pose.renormalized();
        }
        poses.push(pose);
    }
    Ok(GroundTruth {
        profile: *profile,
        dt_gt,
        t_end,
        poses,
    })
}

impl GroundTruth {
    pub fn profile(&self) -> &TwistProfile {
        &self.profile
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt_gt(&self) -> f64 {
        self.dt_gt
    }

    pub fn grid(&self) -> &[Pose3] {
        &self.poses
    }

    /// Pose at any `t` in `[0, t_end]`, completing the last grid step with a
    /// partial Magnus step.
    pub fn pose_at(&self, t: f64) -> Result<Pose3> {
        if !(t >= 0.0 && t <= self.t_end) {
            return Err(Error::TimeOutOfSpan {
                t,
                start: 0.0,
                end: self.t_end,
            });
        }
        let k = ((t / self.dt_gt).floor() as usize).min(self.poses.len() - 1);
        let t_k = k as f64 * self.dt_gt;
        let h = t - t_k;
        if h <= 0.0 {
            return Ok(self.poses[k]);
        }
        Ok(self.poses[k] * magnus_step(&self.profile, t_k, h))
    }

    pub fn twist_at(&self, t: f64) -> Twist6 {
        self.profile.twist(t)
    }

    /// Pose at `t`, continuing the integration past `t_end` when needed.
    fn pose_extended(&self, t: f64) -> Result<Pose3> {
        if t <= self.t_end {
            return self.pose_at(t);
        }
        let mut pose = self.pose_at(self.t_end)?;
        let mut s = self.t_end;
        while s < t {
            let h = (t - s).min(self.dt_gt);
            pose = pose * magnus_step(&self.profile, s, h);
            s += h;
        }
        Ok(pose)
    }

    /// Constant body twist standing for the motion over `(t, t + dt]`.
    pub fn interval_twist(&self, t: f64, dt: f64, mode: ImuSynthesis) -> Result<Twist6> {
        match mode {
            ImuSynthesis::ExactIncrement => {
                let rel = self.pose_extended(t)?.inverse() * self.pose_extended(t + dt)?;
                Ok(se3_log(&rel).scaled(1.0 / dt))
            }
            ImuSynthesis::IntervalMean => {
                let c = 0.5 * (0.6f64).sqrt();
                let nodes = [
                    (0.5 - c, 5.0 / 18.0),
                    (0.5, 8.0 / 18.0),
                    (0.5 + c, 5.0 / 18.0),
                ];
                let sum = nodes.iter().fold(Vector6::zeros(), |acc, (s, w)| {
                    acc + self.profile.twist(t + s * dt).to_vector() * *w
                });
                Ok(Twist6::from_vector(&sum))
            }
        }
    }

    /// Nominal state at `t` consistent with IMU samples of period `dt`; the
    /// body velocity is that of the interval starting at `t`.
    pub fn nav_state(&self, t: f64, dt: f64, mode: ImuSynthesis) -> Result<NavState> {
        Ok(NavState::new(
            self.pose_at(t)?,
            self.interval_twist(t, dt, mode)?.v,
        ))
    }
}

/// How the constant twist of each IMU interval is taken from the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImuSynthesis {
    /// `Log(T(t_{i-1})^-1 T(t_i)) / dt`: the SE(3) model reproduces the
    /// ground-truth poses exactly from noiseless samples.
    #[default]
    ExactIncrement,
    /// Gauss-Legendre mean of the analytic twist; the SE(3) model then has
    /// second-order global error.
    IntervalMean,
}

/// IMU samples at `rate` over `(0, t_end]`, with white noise of density
/// `sigma` (std `sigma / sqrt(dt)` per sample) and bias random walks starting
/// at zero.
///
/// Sample `i` holds the interval twist's angular part as the gyro reading,
/// and an accelerometer reading that moves the body velocity from interval
/// `i` to interval `i + 1` under the SE(3) model.
pub fn synthesize_imu(
    gt: &GroundTruth,
    noise: &ImuNoiseParams,
    rate: f64,
    seed: u64,
) -> Result<Vec<ImuSample>> {
    synthesize_imu_with(gt, noise, rate, seed, ImuSynthesis::default())
}

pub fn synthesize_imu_with(
    gt: &GroundTruth,
    noise: &ImuNoiseParams,
    rate: f64,
    seed: u64,
    mode: ImuSynthesis,
) -> Result<Vec<ImuSample>> {
    noise.validate()?;
    if !(rate > 0.0 && rate.is_finite()) || 1.0 / rate < gt.dt_gt {
        return Err(Error::InvalidParameter(format!(
            "IMU rate {rate} Hz is not compatible with the ground-truth step"
        )));
    }
    let dt = 1.0 / rate;
    let n = (gt.t_end * rate + 1e-9).floor() as usize;
    let g = noise.gravity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal3 = || Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
    let mut bg = Vector3::zeros();
    let mut ba = Vector3::zeros();
    let sqrt_dt = dt.sqrt();
    let mut out = Vec::with_capacity(n);
    let mut twist = gt.interval_twist(0.0, dt, mode)?;
    for i in 1..=n {
        let t_prev = (i - 1) as f64 * dt;
        let t = i as f64 * dt;
        let next = gt.interval_twist(t, dt, mode)?;
        let rot_prev = gt.pose_at(t_prev)?.rot;
        let gyro = twist.w;
        let acc = (so3_exp(&(gyro * dt)) * next.v - twist.v) / dt - rot_prev.transpose() * g;
        twist = next;

        let gyro_meas = gyro + bg + normal3() * (noise.sigma_gyro / sqrt_dt);
        let acc_meas = acc + ba + normal3() * (noise.sigma_acc / sqrt_dt);
        bg += normal3() * (noise.sigma_bg_walk * sqrt_dt);
        ba += normal3() * (noise.sigma_ba_walk * sqrt_dt);
        out.push(ImuSample::new(t, gyro_meas, acc_meas));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldPlane {
    /// Unit normal pointing into the free space.
    pub normal: [f64; 3],
    /// Signed offset: a point `x` is inside when `normal . x + offset >= 0`.
    pub offset: f64,
}

/// Closed convex room bounded by planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModel {
    pub planes: Vec<WorldPlane>,
}

impl Default for WorldModel {
    fn default() -> Self {
        // Walls are kept off the default voxel grid so that no surface lies
        // on a voxel face.
        WorldModel::room(
            Vector3::new(0.13, 3.61, 1.07),
            Vector3::new(22.0, 22.0, 8.0),
            4.0,
        )
    }
}

impl WorldModel {
    /// Box of `size` around `center`, with its four vertical edges cut by
    /// 45-degree walls of depth `chamfer` (m); `chamfer = 0` gives a plain box.
    pub fn room(center: Vector3<f64>, size: Vector3<f64>, chamfer: f64) -> Self {
        let h = size * 0.5;
        let mut planes = Vec::new();
        let mut push = |n: Vector3<f64>, dist: f64| {
            let n = n.normalize();
            // inside: n . (x - center) >= -dist
            planes.push(WorldPlane {
                normal: n.into(),
                offset: dist - n.dot(&center),
            });
        };
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            push(e, h[k]);
            push(-e, h[k]);
        }
        if chamfer > 0.0 {
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let n = Vector3::new(-sx, -sy, 0.0);
                push(n, (h.x + h.y - chamfer) / 2f64.sqrt());
            }
        }
        WorldModel { planes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.planes.len() < 4 {
            return Err(Error::InvalidParameter(
                "world needs at least four planes to be closed".into(),
            ));
        }
        for p in &self.planes {
            let n = Vector3::from(p.normal);
            if !((n.norm() - 1.0).abs() < 1e-9) || !p.offset.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "world plane {p:?} needs a unit normal"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        self.planes
            .iter()
            .all(|p| Vector3::from(p.normal).dot(x) + p.offset > 0.0)
    }

    /// Distance along the unit direction `dir` from `origin` to the first wall.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        if !self.contains(origin) {
            return None;
        }
        self.planes
            .iter()
            .filter_map(|p| {
                let n = Vector3::from(p.normal);
                let nd = n.dot(dir);
                (nd < 0.0).then(|| -(n.dot(origin) + p.offset) / nd)
            })
            .filter(|s| *s > 0.0)
            .min_by(|a, b| a.total_cmp(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    /// s.
    pub scan_period: f64,
    pub n_points: usize,
    pub n_channels: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    /// Range noise std, m.
    pub raw_sigma: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            scan_period: 0.1,
            n_points: 2000,
            n_channels: 16,
            min_elevation_deg: -30.0,
            max_elevation_deg: 30.0,
            raw_sigma: 0.02,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scan_period > 0.0
            && self.n_points > 0
            && self.n_channels > 0
            && self.min_elevation_deg <= self.max_elevation_deg
            && self.min_elevation_deg > -90.0
            && self.max_elevation_deg < 90.0
            && self.raw_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("lidar config {self:?}")))
        }
    }

    /// Unit ray of point `j` in the LiDAR frame; the azimuth sweeps clockwise.
    pub fn ray(&self, j: usize) -> Vector3<f64> {
        let az = -2.0 * PI * j as f64 / self.n_points as f64;
        let ch = j % self.n_channels;
        let el = if self.n_channels == 1 {
            0.5 * (self.min_elevation_deg + self.max_elevation_deg)
        } else {
            self.min_elevation_deg
                + (self.max_elevation_deg - self.min_elevation_deg) * ch as f64
                    / (self.n_channels - 1) as f64
        }
        .to_radians();
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// One sweep over `(t_end - scan_period, t_end]`. Each point is cast from
/// the true sensor pose at its own timestamp and expressed in that frame.
pub fn synthesize_scan(
    gt: &GroundTruth,
    world: &WorldModel,
    lidar: &LidarConfig,
    ext: &ExtrinsicCalib,
    t_end: f64,
    seed: u64,
) -> Result<Vec<RawPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = lidar.raw_sigma * lidar.raw_sigma;
    (0..lidar.n_points)
        .map(|j| {
            let t =
                t_end - lidar.scan_period * (lidar.n_points - 1 - j) as f64 / lidar.n_points as f64;
            let sensor = gt.pose_at(t)? * ext.t_imu_lidar;
            let u = lidar.ray(j);
            let s = world
                .cast_ray(&sensor.trans, &(sensor.rot * u))
                .ok_or(Error::RayEscaped { index: j })?;
            let noise: f64 = rng.sample(StandardNormal);
            let range = s + lidar.raw_sigma * noise;
            Ok(RawPoint::new(
                u * range,
                t,
                nalgebra::Matrix3::identity() * sigma2,
            ))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fig2Row {
    pub step: usize,
    pub t: f64,
    pub se3_trans_err: f64,
    pub se3_rot_err: f64,
    pub base_trans_err: f64,
    pub base_rot_err: f64,
}

/// Noiseless propagation with both models against dense ground truth.
pub fn run_fig2_experiment(
    profile: &TwistProfile,
    dt: f64,
    n_steps: usize,
    dt_gt: f64,
) -> Result<Vec<Fig2Row>> {
    if n_steps == 0 || !(dt > 0.0) {
        return Err(Error::InvalidParameter(
            "fig2 needs n_steps >= 1 and dt > 0".into(),
        ));
    }
    let t_end = dt * n_steps as f64;
    let gt = ground_truth_trajectory(profile, t_end, dt_gt)?;
    let noise = ImuNoiseParams::noiseless();
    let imu = synthesize_imu(&gt, &noise, 1.0 / dt, 0)?;
    let x0 = gt.nav_state(0.0, dt, ImuSynthesis::default())?;
    let (mut se3, mut base) = (x0, x0);
    let mut t_prev = 0.0;
    imu.iter()
        .enumerate()
        .map(|(i, u)| {
            let h = u.t - t_prev;
            t_prev = u.t;
            se3 = propagate_nominal(PropagationModel::Se3, &se3, u, &noise, h);
            base = propagate_nominal(PropagationModel::Baseline, &base, u, &noise, h);
            let truth = gt.pose_at(u.t)?;
            let (st, sr) = se3.pose.chordal_parts(&truth);
            let (bt, br) = base.pose.chordal_parts(&truth);
            Ok(Fig2Row {
                step: i + 1,
                t: u.t,
                se3_trans_err: st,
                se3_rot_err: sr,
                base_trans_err: bt,
                base_rot_err: br,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig3Config {
    pub n_inputs: usize,
    /// s.
    pub dt: f64,
    pub n_trials: usize,
    pub report_every: usize,
    pub noise: ImuNoiseParams,
    /// Std of every initial error-state component.
    pub p0_sigma: f64,
    pub profile: TwistProfile,
    pub dt_gt: f64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            n_inputs: 100,
            dt: 0.01,
            n_trials: 1000,
            report_every: 20,
            noise: ImuNoiseParams {
                sigma_gyro: 0.01,
                sigma_acc: 0.1,
                sigma_bg_walk: 1e-3,
                sigma_ba_walk: 1e-2,
                ..Default::default()
            },
            p0_sigma: 0.01,
            profile: TwistProfile::default(),
            dt_gt: 1e-4,
        }
    }
}

impl Fig3Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 100 {
            return Err(Error::InvalidParameter(format!(
                "n_trials must be at least 100, got {}",
                self.n_trials
            )));
        }
        if self.n_inputs == 0
            || self.report_every == 0
            || !(self.dt > 0.0)
            || !(self.p0_sigma >= 0.0)
        {
            return Err(Error::InvalidParameter(
                "fig3 needs n_inputs, report_every, dt > 0 and p0_sigma >= 0".into(),
            ));
        }
        self.noise.validate()?;
        self.profile.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LookbackResult {
    /// History index of the target pose; the reference is the last entry.
    pub index: usize,
    pub t: f64,
    pub cov_cross: Matrix6<f64>,
    pub cov_indep: Matrix6<f64>,
    pub nees_mean_cross: f64,
    pub nees_mean_indep: f64,
    pub coverage_cross: f64,
    pub coverage_indep: f64,
    /// Sampled relative-pose errors, one per trial.
    pub samples: Vec<Vector6<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    pub n_trials: usize,
    pub n_inputs: usize,
    /// Mean cross-term NEES over all lookbacks.
    pub nees_mean: f64,
    /// Two-sided 99% interval for the mean of `n_trials` chi-square(6) draws.
    pub nees_ci_low: f64,
    pub nees_ci_high: f64,
    /// 95% quantile of chi-square(6).
    pub chi2_95: f64,
    /// Smallest cross-term coverage over the lookbacks.
    pub coverage_95: f64,
    pub lookbacks: Vec<LookbackResult>,
}

fn nees(e: &Vector6<f64>, cov: &Matrix6<f64>) -> Result<f64> {
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(if e.iter().all(|v| *v == 0.0) {
            0.0
        } else {
            f64::INFINITY
        });
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("relative covariance is not positive definite".into()))?;
    Ok(e.dot(&chol.solve(e)))
}

fn standard_normal_vec<const N: usize>(rng: &mut ChaCha8Rng) -> nalgebra::SVector<f64, N> {
    nalgebra::SVector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal))
}

/// Monte Carlo check of the relative-pose covariance with and without cross
/// terms. Truth trajectories follow the noisy defining map from a sampled
/// initial error; the nominal follows the noiseless one.
pub fn run_fig3_experiment(cfg: &Fig3Config, seed: u64) -> Result<McReport> {
    cfg.validate()?;
    let t_end = cfg.dt * cfg.n_inputs as f64;
    let gt = ground_truth_trajectory(&cfg.profile, t_end, cfg.dt_gt)?;
    let imu = synthesize_imu(
        &gt,
        &ImuNoiseParams {
            gravity: cfg.noise.gravity,
            ..ImuNoiseParams::noiseless()
        },
        1.0 / cfg.dt,
        0,
    )?;
    let x0 = gt.nav_state(0.0, cfg.dt, ImuSynthesis::default())?;
    let p0 = Matrix15::identity() * (cfg.p0_sigma * cfg.p0_sigma);
    let steps = propagate_batch(&x0, &p0, 0.0, &imu, &cfg.noise, PropagationModel::Se3)?;
    let mut history = PoseHistory::new(0.0, x0.pose, p0);
    history.extend(&steps)?;

    let k = history.len() - 1;
    let targets: Vec<usize> = (0..k).step_by(cfg.report_every).collect();
    let rels_nom: Vec<Pose3> = targets
        .iter()
        .map(|&j| history.latest().pose.inverse() * history.entries()[j].pose)
        .collect();

    let q_std: Vec<Vector12> = steps
        .iter()
        .map(|s| s.q.diagonal().map(f64::sqrt))
        .collect();
    let errors: Vec<Vec<Vector6<f64>>> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let d0: Vector15 = standard_normal_vec::<15>(&mut rng) * cfg.p0_sigma;
            let mut x = boxplus(&x0, &ErrorState15::from_vector(&d0));
            let mut poses = Vec::with_capacity(k + 1);
            poses.push(x.pose);
            for (u, (s, std)) in imu.iter().zip(steps.iter().zip(&q_std)) {
                let w = standard_normal_vec::<12>(&mut rng).component_mul(std);
                x = propagate_se3_with_noise(&x, u, &cfg.noise, &w, s.dt);
                poses.push(x.pose);
            }
            targets
                .iter()
                .zip(&rels_nom)
                .map(|(&j, rel_nom)| {
                    let rel_true = poses[k].inverse() * poses[j];
                    se3_log(&(rel_nom.inverse() * rel_true)).to_vector()
                })
                .collect()
        })
        .collect();

    let chi6 = ChiSquared::new(6.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let chi2_95 = chi6.inverse_cdf(0.95);
    let n = cfg.n_trials as f64;
    let chi_n = ChiSquared::new(6.0 * n).map_err(|e| Error::Numerical(e.to_string()))?;
    let (ci_low, ci_high) = (chi_n.inverse_cdf(0.005) / n, chi_n.inverse_cdf(0.995) / n);

    let mut lookbacks = Vec::with_capacity(targets.len());
    for (slot, &j) in targets.iter().enumerate() {
        let cross = *history.relative_cov(j, true)?.cov.matrix();
        let indep = *history.relative_cov(j, false)?.cov.matrix();
        let samples: Vec<Vector6<f64>> = errors.iter().map(|e| e[slot]).collect();
        let (mut sum_c, mut sum_i, mut in_c, mut in_i) = (0.0, 0.0, 0usize, 0usize);
        for e in &samples {
            let (nc, ni) = (nees(e, &cross)?, nees(e, &indep)?);
            sum_c += nc;
            sum_i += ni;
            in_c += usize::from(nc <= chi2_95);
            in_i += usize::from(ni <= chi2_95);
        }
        lookbacks.push(LookbackResult {
            index: j,
            t: history.entries()[j].t,
            cov_cross: cross,
            cov_indep: indep,
            nees_mean_cross: sum_c / n,
            nees_mean_indep: sum_i / n,
            coverage_cross: in_c as f64 / n,
            coverage_indep: in_i as f64 / n,
            samples,
        });
    }
    let nees_mean =
        lookbacks.iter().map(|l| l.nees_mean_cross).sum::<f64>() / lookbacks.len() as f64;
    let coverage_95 = lookbacks
        .iter()
        .map(|l| l.coverage_cross)
        .fold(1.0, f64::min);
    Ok(McReport {
        n_trials: cfg.n_trials,
        n_inputs: cfg.n_inputs,
        nees_mean,
        nees_ci_low: ci_low,
        nees_ci_high: ci_high,
        chi2_95,
        coverage_95,
        lookbacks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LioSimConfig {
    pub profile: TwistProfile,
    pub world: WorldModel,
    pub lidar: LidarConfig,
    pub ext: ExtrinsicCalib,
    /// Start position of the IMU in the world, m.
    pub start_position: [f64; 3],
    /// s.
    pub duration: f64,
    /// Hz.
    pub imu_rate: f64,
    pub dt_gt: f64,
    /// Noise actually applied to the synthesized IMU.
    pub imu_noise: ImuNoiseParams,
    /// Std of every initial error-state component given to the filter.
    pub p0_sigma: f64,
}

impl Default for LioSimConfig {
    fn default() -> Self {
        LioSimConfig {
            profile: TwistProfile::standard_loop(),
            world: WorldModel::default(),
            lidar: LidarConfig {
                raw_sigma: 0.01,
                ..LidarConfig::default()
            },
            ext: ExtrinsicCalib::default(),
            start_position: [0.0; 3],
            duration: 10.0,
            imu_rate: 20.0,
            dt_gt: 1e-4,
            imu_noise: ImuNoiseParams::typical(),
            p0_sigma: 1e-3,
        }
    }
}

impl LioSimConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.world.validate()?;
        self.lidar.validate()?;
        self.imu_noise.validate()?;
        let scans = self.duration / self.lidar.scan_period;
        let per_scan = self.imu_rate * self.lidar.scan_period;
        if !(scans >= 1.0 && scans.is_finite()) || !(per_scan >= 1.0) || !(self.p0_sigma >= 0.0) {
            return Err(Error::InvalidParameter(
                "duration must cover a scan and the IMU must sample at least once per scan".into(),
            ));
        }
        Ok(())
    }

    pub fn n_scans(&self) -> usize {
        (self.duration / self.lidar.scan_period + 1e-9).floor() as usize
    }
}

/// A synthesized run: ground truth, sensor streams and the filter's start.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub gt: GroundTruth,
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
    pub x0: NavState,
    pub p0: Matrix15,
}

pub fn synthesize_dataset(cfg: &LioSimConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let start = Pose3::from_translation(Vector3::from(cfg.start_position));
    let gt = ground_truth_from(&cfg.profile, start, cfg.duration, cfg.dt_gt)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let imu = synthesize_imu(&gt, &cfg.imu_noise, cfg.imu_rate, seeds.random())?;
    let scan_seeds: Vec<u64> = (0..cfg.n_scans()).map(|_| seeds.random()).collect();
    let scans = scan_seeds
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            // Clamped so rounding never pushes the last scan past the data.
            let t_end = ((k + 1) as f64 * cfg.lidar.scan_period).min(cfg.duration);
            let points = synthesize_scan(&gt, &cfg.world, &cfg.lidar, &cfg.ext, t_end, *s)?;
            Ok(Scan { t_end, points })
        })
        .collect::<Result<Vec<_>>>()?;
    let x0 = gt.nav_state(0.0, 1.0 / cfg.imu_rate, ImuSynthesis::default())?;
    let p0 = Matrix15::identity() * (cfg.p0_sigma * cfg.p0_sigma);
    Ok(Dataset {
        gt,
        imu,
        scans,
        x0,
        p0,
    })
}

#[derive(Clone, Debug)]
pub struct LioRun {
    pub results: Vec<ScanResult>,
    pub truth: Vec<Pose3>,
    pub ate: f64,
}

/// Runs the filter over a dataset and scores it against the ground truth.
pub fn evaluate_lio(data: &Dataset, filter_cfg: &FilterConfig) -> Result<LioRun> {
    let results = run_lio(
        *filter_cfg,
        data.x0,
        data.p0,
        0.0,
        data.imu.clone(),
        &data.scans,
    )?;
    let truth = results
        .iter()
        .map(|r| data.gt.pose_at(r.t))
        .collect::<Result<Vec<_>>>()?;
    let est: Vec<Vector3<f64>> = results.iter().map(|r| r.posterior.pose.trans).collect();
    let gt_pos: Vec<Vector3<f64>> = truth.iter().map(|p| p.trans).collect();
    let ate = ate_rmse(&est, &gt_pos)?;
    Ok(LioRun {
        results,
        truth,
        ate,
    })
}

pub fn run_lio_simulation(
    cfg: &LioSimConfig,
    filter_cfg: &FilterConfig,
    seed: u64,
) -> Result<LioRun> {
    evaluate_lio(&synthesize_dataset(cfg, seed)?, filter_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uamc::undistort_scan;

    #[test]
    fn constant_translation_is_a_straight_line() {
        let p = TwistProfile::constant(Vector3::new(1.0, -2.0, 0.5), Vector3::zeros());
        let gt = ground_truth_trajectory(&p, 1.0, 1e-3).unwrap();
        let end = gt.pose_at(1.0).unwrap();
        assert!((end.trans - Vector3::new(1.0, -2.0, 0.5)).norm() < 1e-12);
        assert!(end.rot.angle() < 1e-15);
    }

    #[test]
    fn constant_twist_follows_one_parameter_subgroup() {
        let xi = Twist6::new(Vector3::new(1.0, 0.3, -0.2), Vector3::new(0.4, -0.9, 1.3));
        let gt = ground_truth_trajectory(&TwistProfile::constant(xi.v, xi.w), 2.0, 1e-4).unwrap();
        for t in [0.5, 1.23456, 2.0] {
            let expected = se3_exp(&xi.scaled(t));
            let got = gt.pose_at(t).unwrap();
            assert!((got.to_homogeneous() - expected.to_homogeneous()).norm() < 1e-9);
        }
    }

    #[test]
    fn step_halving_changes_endpoint_below_tolerance() {
        for profile in [TwistProfile::default(), TwistProfile::standard_loop()] {
            let a = ground_truth_trajectory(&profile, 1.0, 1e-4)
                .unwrap()
                .pose_at(1.0)
                .unwrap();
            let b = ground_truth_trajectory(&profile, 1.0, 5e-5)
                .unwrap()
                .pose_at(1.0)
                .unwrap();
            let d = (a.to_homogeneous() - b.to_homogeneous()).norm();
            assert!(d < 1e-8, "{d}");
        }
    }

    #[test]
    fn magnus_commutator_sign_matters() {
        // Reference from a much finer grid; the fourth-order step must beat
        // the same step with the commutator removed.
        let profile = TwistProfile::default();
        let fine = ground_truth_trajectory(&profile, 0.2, 1e-5)
            .unwrap()
            .pose_at(0.2)
            .unwrap();
        let mut plain = Pose3::identity();
        let h = 0.02;
        let c = 3f64.sqrt() / 6.0;
        for k in 0..10 {
            let t = k as f64 * h;
            let a1 = profile.twist(t + (0.5 - c) * h).to_vector();
            let a2 = profile.twist(t + (0.5 + c) * h).to_vector();
            plain = plain * se3_exp(&Twist6::from_vector(&((a1 + a2) * (0.5 * h))));
        }
        let magnus = (0..10).fold(Pose3::identity(), |p, k| {
            p * magnus_step(&profile, k as f64 * h, h)
        });
        let err = |p: &Pose3| (p.to_homogeneous() - fine.to_homogeneous()).norm();
        assert!(
            err(&magnus) < 0.1 * err(&plain),
            "{} vs {}",
            err(&magnus),
            err(&plain)
        );
    }

    #[test]
    fn stationary_imu_measures_gravity_exactly() {
        let gt = ground_truth_from(
            &TwistProfile::stationary(),
            Pose3::new(so3_exp(&Vector3::new(0.3, -0.2, 0.1)), Vector3::zeros()),
            0.1,
            1e-4,
        )
        .unwrap();
        let noise = ImuNoiseParams::noiseless();
        let imu = synthesize_imu(&gt, &noise, 100.0, 1).unwrap();
        assert_eq!(imu.len(), 10);
        let expected = -(gt.pose_at(0.0).unwrap().rot.transpose() * noise.gravity());
        for s in &imu {
            assert_eq!(s.gyro, Vector3::zeros());
            assert!((s.acc - expected).norm() < 1e-14);
        }
    }

    #[test]
    fn imu_is_seeded() {
        let gt = ground_truth_trajectory(&TwistProfile::default(), 0.2, 1e-4).unwrap();
        let noise = Fig3Config::default().noise;
        assert_eq!(
            synthesize_imu(&gt, &noise, 100.0, 3).unwrap(),
            synthesize_imu(&gt, &noise, 100.0, 3).unwrap()
        );
        assert_ne!(
            synthesize_imu(&gt, &noise, 100.0, 3).unwrap(),
            synthesize_imu(&gt, &noise, 100.0, 4).unwrap()
        );
    }

    fn closed_loop_error(rate: f64, mode: ImuSynthesis) -> f64 {
        let t_end = 1.0;
        let gt = ground_truth_trajectory(&TwistProfile::default(), t_end, 1e-4).unwrap();
        let noise = ImuNoiseParams::noiseless();
        let imu = synthesize_imu_with(&gt, &noise, rate, 0, mode).unwrap();
        let x0 = gt.nav_state(0.0, 1.0 / rate, mode).unwrap();
        let steps = propagate_batch(
            &x0,
            &Matrix15::zeros(),
            0.0,
            &imu,
            &noise,
            PropagationModel::Se3,
        )
        .unwrap();
        let end = steps.last().unwrap().state_after.pose;
        let (dt, dr) = end.chordal_parts(&gt.pose_at(t_end).unwrap());
        dt + dr
    }

    #[test]
    fn noiseless_closed_loop_is_second_order_with_interval_means() {
        let rates = [100.0, 200.0, 400.0, 800.0];
        let errs: Vec<f64> = rates
            .iter()
            .map(|r| closed_loop_error(*r, ImuSynthesis::IntervalMean))
            .collect();
        let slope = -(errs[3].ln() - errs[0].ln()) / (rates[3] / rates[0]).ln();
        assert!(slope >= 1.9, "errors {errs:?}, slope {slope}");
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn noiseless_closed_loop_is_exact_with_increments() {
        for rate in [100.0, 400.0] {
            let e = closed_loop_error(rate, ImuSynthesis::ExactIncrement);
            assert!(e < 1e-10, "{rate}: {e}");
        }
    }

    #[test]
    fn room_rays_hit_walls() {
        let world = WorldModel::room(Vector3::zeros(), Vector3::new(10.0, 8.0, 4.0), 0.0);
        assert_eq!(world.cast_ray(&Vector3::zeros(), &Vector3::x()), Some(5.0));
        assert_eq!(world.cast_ray(&Vector3::zeros(), &-Vector3::z()), Some(2.0));
        let d = Vector3::new(1.0, 1.0, 0.0).normalize();
        assert!((world.cast_ray(&Vector3::zeros(), &d).unwrap() - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            world.cast_ray(&Vector3::new(20.0, 0.0, 0.0), &Vector3::x()),
            None
        );
        let chamfered = WorldModel::room(Vector3::zeros(), Vector3::new(10.0, 10.0, 4.0), 2.0);
        let hit = chamfered.cast_ray(&Vector3::zeros(), &d).unwrap();
        assert!((hit - (10.0 - 2.0) / 2f64.sqrt()).abs() < 1e-12, "{hit}");
        chamfered.validate().unwrap();
    }

    #[test]
    fn static_scan_matches_single_pose_scan() {
        let gt = ground_truth_trajectory(&TwistProfile::stationary(), 0.1, 1e-4).unwrap();
        let world = WorldModel::default();
        let lidar = LidarConfig {
            n_points: 200,
            raw_sigma: 0.0,
            ..Default::default()
        };
        let scan =
            synthesize_scan(&gt, &world, &lidar, &ExtrinsicCalib::default(), 0.1, 5).unwrap();
        for (j, p) in scan.iter().enumerate() {
            let s = world.cast_ray(&Vector3::zeros(), &lidar.ray(j)).unwrap();
            assert!((p.xyz - lidar.ray(j) * s).norm() < 1e-12);
        }
        assert!((scan.last().unwrap().t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn true_transforms_undistort_exactly() {
        let profile =
            TwistProfile::constant(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0));
        let gt = ground_truth_trajectory(&profile, 0.1, 1e-4).unwrap();
        let world = WorldModel::default();
        let lidar = LidarConfig {
            n_points: 300,
            raw_sigma: 0.0,
            ..Default::default()
        };
        let ext = ExtrinsicCalib {
            t_imu_lidar: Pose3::new(
                so3_exp(&Vector3::new(0.0, 0.0, 0.3)),
                Vector3::new(0.1, 0.0, 0.05),
            ),
        };
        let scan = synthesize_scan(&gt, &world, &lidar, &ext, 0.1, 5).unwrap();
        // history on the ground-truth grid, so interpolation is exact for a constant twist
        let mut h = PoseHistory::new(0.0, Pose3::identity(), Matrix15::zeros());
        for k in 1..=100 {
            let t = k as f64 * 1e-3;
            let step = crate::propagation::PropagationStep {
                t,
                dt: 1e-3,
                state_after: NavState::new(gt.pose_at(t).unwrap(), Vector3::zeros()),
                f_x: Matrix15::identity(),
                f_w: crate::state::Matrix15x12::zeros(),
                q: crate::state::Matrix12::zeros(),
                cov_after: Matrix15::zeros(),
            };
            h.advance(&step).unwrap();
        }
        let out = undistort_scan(&scan, &h, &ext, true).unwrap();
        let end = gt.pose_at(0.1).unwrap();
        for (p, q) in scan.iter().zip(&out) {
            let world_direct = (gt.pose_at(p.t).unwrap() * ext.t_imu_lidar).transform_point(&p.xyz);
            assert!((end.transform_point(&q.xyz) - world_direct).norm() < 1e-9);
        }
    }

    #[test]
    fn range_noise_scatter_matches_sigma() {
        let gt = ground_truth_trajectory(&TwistProfile::stationary(), 0.1, 1e-4).unwrap();
        let world = WorldModel::default();
        let lidar = LidarConfig {
            n_points: 1,
            raw_sigma: 0.05,
            ..Default::default()
        };
        let truth = world.cast_ray(&Vector3::zeros(), &lidar.ray(0)).unwrap();
        let samples: Vec<f64> = (0..4000)
            .map(|s| {
                synthesize_scan(&gt, &world, &lidar, &ExtrinsicCalib::default(), 0.1, s).unwrap()[0]
                    .xyz
                    .norm()
                    - truth
            })
            .collect();
        let var = samples.iter().map(|e| e * e).sum::<f64>() / samples.len() as f64;
        assert!((var.sqrt() / 0.05 - 1.0).abs() < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn fig2_zero_rotation_models_agree() {
        let p = TwistProfile {
            angular_amplitude: [0.0; 3],
            ..TwistProfile::default()
        };
        let rows = run_fig2_experiment(&p, 1e-2, 10, 1e-4).unwrap();
        assert_eq!(rows.len(), 10);
        for r in rows {
            assert!((r.se3_trans_err - r.base_trans_err).abs() < 1e-12);
            assert!((r.se3_rot_err - r.base_rot_err).abs() < 1e-12);
        }
    }

    #[test]
    fn fig3_zero_noise_gives_zero_errors() {
        let cfg = Fig3Config {
            noise: ImuNoiseParams::noiseless(),
            p0_sigma: 0.0,
            n_trials: 100,
            ..Default::default()
        };
        let rep = run_fig3_experiment(&cfg, 1).unwrap();
        for l in &rep.lookbacks {
            assert_eq!(l.cov_cross, Matrix6::zeros());
            assert!(l.samples.iter().all(|e| e.norm() < 1e-12));
        }
        assert!(run_fig3_experiment(
            &Fig3Config {
                n_trials: 10,
                ..cfg
            },
            1
        )
        .is_err());
    }

    #[test]
    fn fig3_is_seeded() {
        let cfg = Fig3Config {
            n_trials: 100,
            ..Default::default()
        };
        assert_eq!(
            run_fig3_experiment(&cfg, 9).unwrap(),
            run_fig3_experiment(&cfg, 9).unwrap()
        );
    }
}
