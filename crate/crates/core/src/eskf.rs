//! Error-state Kalman filter driven by IMU propagation and point-to-plane
//! residuals against a [`PlanarMap`].
//!
//! One scan runs: propagate over the scan's IMU samples, build the pose
//! history, deskew the scan, associate points with map planes, iterate the
//! update, insert the posterior points into the map and drop the history.

use std::time::{Duration, Instant};

use nalgebra::{RowSVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointcov::PoseHistory;
use crate::liegroup::{se3_right_jacobian, skew};
use crate::planarmap::{PlanarMap, PlanarMapConfig, PlaneFeature};
use crate::propagation::{propagate_batch, PropagationModel};
use crate::state::{
    boxplus, ErrorState15, ImuNoiseParams, ImuSample, Matrix15, NavState, Vector15, IDX_TRANS,
};
use crate::uamc::{
    ExtrinsicCalib, PoseLookup, ProbabilisticPoint, RawPoint, UamcOptions, Undistorter,
};

pub type Row15 = RowSVector<f64, 15>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub imu_noise: ImuNoiseParams,
    pub ext: ExtrinsicCalib,
    pub max_update_iters: usize,
    /// Stop iterating once the correction changes by less than this tangent norm.
    pub convergence_eps: f64,
    /// Residuals with `r^2 / noise_var` above this are rejected.
    pub gate_chi2: f64,
    /// Lower bound on a residual's noise variance (m^2). Keeps the information
    /// matrix finite when point covariances collapse to zero.
    pub min_residual_var: f64,
    pub with_cross_terms: bool,
    /// SE(3) nominal propagation; off selects the SO(3) x R^3 model.
    pub with_se3_propagation: bool,
    /// Fold relative-transform uncertainty into point covariances.
    pub with_uamc: bool,
    pub pose_lookup: PoseLookup,
    pub map: PlanarMapConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            imu_noise: ImuNoiseParams::typical(),
            ext: ExtrinsicCalib::default(),
            max_update_iters: 3,
            convergence_eps: 1e-6,
            gate_chi2: 1e4,
            min_residual_var: 1e-6,
            with_cross_terms: true,
            with_se3_propagation: true,
            with_uamc: true,
            pose_lookup: PoseLookup::Interpolate,
            map: PlanarMapConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.imu_noise.validate()?;
        self.map.validate()?;
        if self.max_update_iters < 1 {
            return Err(Error::InvalidParameter(
                "max_update_iters must be at least 1".into(),
            ));
        }
        if !(self.min_residual_var >= 0.0) {
            return Err(Error::InvalidParameter(
                "min_residual_var must be non-negative".into(),
            ));
        }
        if !(self.convergence_eps >= 0.0) || !(self.gate_chi2 > 0.0) {
            return Err(Error::InvalidParameter(
                "convergence_eps and gate_chi2 must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn propagation_model(&self) -> PropagationModel {
        if self.with_se3_propagation {
            PropagationModel::Se3
        } else {
            PropagationModel::Baseline
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStatus {
    Updated,
    /// The map had no planes yet; the prior was kept and the scan was added to the map.
    MapInitialized,
    /// No residual survived matching and gating; the prior was kept.
    NoCorrespondences,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModuleTimings {
    pub propagation: Duration,
    pub undistortion: Duration,
    pub update: Duration,
    pub map: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    pub t: f64,
    pub posterior: NavState,
    pub p_post: Matrix15,
    pub n_points: usize,
    pub n_residuals: usize,
    pub n_rejected: usize,
    pub iterations: usize,
    pub status: UpdateStatus,
    pub timings: ModuleTimings,
}

/// Point-to-plane residual `n . (T p - c)`, its Jacobian under right
/// perturbation of the pose, and the variance induced by the point covariance.
pub fn residual_and_jacobians(
    x: &NavState,
    pt: &ProbabilisticPoint,
    plane: &PlaneFeature,
) -> (f64, Row15, f64) {
    let rot = x.pose.rot.matrix();
    let world = x.pose.transform_point(&pt.xyz);
    let r = plane.normal.dot(&(world - plane.centroid));
    let nr = plane.normal.transpose() * rot;
    let mut h = Row15::zeros();
    h.fixed_view_mut::<1, 3>(0, IDX_TRANS).copy_from(&nr);
    h.fixed_view_mut::<1, 3>(0, IDX_TRANS + 3)
        .copy_from(&(-nr * skew(&pt.xyz)));
    let noise_var = (nr * pt.cov * nr.transpose())[(0, 0)];
    (r, h, noise_var)
}

/// A point associated with a plane for the duration of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point: ProbabilisticPoint,
    pub plane: PlaneFeature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutput {
    pub posterior: NavState,
    /// Correction applied to the prior.
    pub delta: ErrorState15,
    /// Posterior covariance in the prior's tangent space.
    pub p_update: Matrix15,
    /// Posterior covariance moved to the posterior's tangent space.
    pub p_post: Matrix15,
    pub n_used: usize,
    pub n_rejected: usize,
    pub iterations: usize,
}

/// Tangent-space map from the prior chart to the chart at `prior ⊞ delta`.
fn reset_jacobian(delta: &ErrorState15) -> Matrix15 {
    let mut g = Matrix15::identity();
    g.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&se3_right_jacobian(&delta.dpose));
    g
}

/// Iterated MAP update over fixed correspondences.
///
/// Each iteration relinearizes every residual about `prior ⊞ delta` and solves
/// the normal equations in the form `(I + P N)^-1 P`, which stays valid for a
/// singular `P`. Gating is decided once at the prior.
pub fn update(
    prior: &NavState,
    p_prior: &Matrix15,
    corr: &[Correspondence],
    cfg: &FilterConfig,
) -> Result<UpdateOutput> {
    let unchanged = |n_rejected| UpdateOutput {
        posterior: *prior,
        delta: ErrorState15::zero(),
        p_update: *p_prior,
        p_post: *p_prior,
        n_used: 0,
        n_rejected,
        iterations: 0,
    };

    let accepted: Vec<&Correspondence> = corr
        .iter()
        .filter(|c| {
            let (r, h, var) = residual_and_jacobians(prior, &c.point, &c.plane);
            let var = var.max(cfg.min_residual_var);
            h.iter().any(|v| *v != 0.0) && var > 0.0 && r * r / var <= cfg.gate_chi2
        })
        .collect();
    let n_rejected = corr.len() - accepted.len();
    if accepted.is_empty() {
        return Ok(unchanged(n_rejected));
    }

    let mut delta = Vector15::zeros();
    let mut n_info = Matrix15::zeros();
    let mut gain_pre = Matrix15::zeros();
    let mut iterations = 0;
    for _ in 0..cfg.max_update_iters {
        iterations += 1;
        let dx = ErrorState15::from_vector(&delta);
        let x = boxplus(prior, &dx);
        let j = reset_jacobian(&dx);
        n_info = Matrix15::zeros();
        let mut b = Vector15::zeros();
        for c in &accepted {
            let (r, h, var) = residual_and_jacobians(&x, &c.point, &c.plane);
            let var = var.max(cfg.min_residual_var);
            let h = h * j;
            let ht = h.transpose();
            n_info += ht * h / var;
            b += ht * ((h * delta)[(0, 0)] - r) / var;
        }
        let lhs = Matrix15::identity() + p_prior * n_info;
        let lu = lhs.lu();
        gain_pre = lu
            .solve(&Matrix15::identity())
            .ok_or_else(|| Error::Numerical("singular update system".into()))?;
        let next = gain_pre * p_prior * b;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite update step".into()));
        }
        let step = (next - delta).norm();
        delta = next;
        if step < cfg.convergence_eps {
            break;
        }
    }

    // Joseph form with the last linearization: K H = M P N, K R K^T = M P N P M^T.
    let kh = gain_pre * p_prior * n_info;
    let i_kh = Matrix15::identity() - kh;
    let p_update = i_kh * p_prior * i_kh.transpose()
        + gain_pre * p_prior * n_info * p_prior * gain_pre.transpose();
    let p_update = (p_update + p_update.transpose()) * 0.5;

    let dx = ErrorState15::from_vector(&delta);
    let g = reset_jacobian(&dx);
    let p_post = g * p_update * g.transpose();
    Ok(UpdateOutput {
        posterior: boxplus(prior, &dx),
        delta: dx,
        p_update,
        p_post: (p_post + p_post.transpose()) * 0.5,
        n_used: accepted.len(),
        n_rejected,
        iterations,
    })
}

/// Splits a time-ordered IMU stream at scan boundaries.
///
/// Sample `i` covers `(t_{i-1}, t_i]` with constant readings, so a sample
/// straddling a boundary is cut into two samples with the same readings.
#[derive(Clone, Debug)]
pub struct ImuBuffer {
    samples: Vec<ImuSample>,
    next: usize,
}

impl ImuBuffer {
    /// [`ImuBuffer::take_until`] for the scan at `index`, naming the scan when
    /// the IMU stream ends too early.
    pub fn take_scan(&mut self, index: usize, t_end: f64) -> Result<Vec<ImuSample>> {
        self.take_until(t_end).map_err(|e| match e {
            Error::TimeOutOfSpan { t, start, end } => Error::ScanOutOfSpan { index, t, start, end },
            e => e,
        })
    }

    pub fn new(samples: Vec<ImuSample>) -> Result<Self> {
        crate::state::check_monotone(&samples)?;
        Ok(ImuBuffer { samples, next: 0 })
    }

    pub fn remaining(&self) -> &[ImuSample] {
        &self.samples[self.next..]
    }

    /// Samples covering `(previous cut, t_end]`, ending exactly at `t_end`.
    pub fn take_until(&mut self, t_end: f64) -> Result<Vec<ImuSample>> {
        let rest = &self.samples[self.next..];
        let n_full = rest.partition_point(|s| s.t <= t_end);
        let mut out = rest[..n_full].to_vec();
        self.next += n_full;
        if out.last().map_or(true, |s| s.t < t_end) {
            let after = self.samples.get(self.next).ok_or(Error::TimeOutOfSpan {
                t: t_end,
                start: self.samples.first().map_or(f64::NAN, |s| s.t),
                end: self.samples.last().map_or(f64::NAN, |s| s.t),
            })?;
            out.push(ImuSample { t: t_end, ..*after });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Filter {
    cfg: FilterConfig,
    x: NavState,
    p: Matrix15,
    t: f64,
    map: PlanarMap,
}

impl Filter {
    pub fn new(cfg: FilterConfig, x0: NavState, p0: Matrix15, t0: f64) -> Result<Self> {
        cfg.validate()?;
        let map = PlanarMap::new(cfg.map)?;
        Ok(Filter {
            cfg,
            x: x0,
            p: p0,
            t: t0,
            map,
        })
    }

    pub fn state(&self) -> &NavState {
        &self.x
    }

    pub fn covariance(&self) -> &Matrix15 {
        &self.p
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn map(&self) -> &PlanarMap {
        &self.map
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    /// Processes one scan whose IMU samples cover `(t, t_k]`; `t_k` is the
    /// last sample time and the scan's reference time.
    pub fn process_scan(&mut self, imu: &[ImuSample], scan: &[RawPoint]) -> Result<ScanResult> {
        let mut timings = ModuleTimings::default();
        let clock = Instant::now();
        let steps = propagate_batch(
            &self.x,
            &self.p,
            self.t,
            imu,
            &self.cfg.imu_noise,
            self.cfg.propagation_model(),
        )?;
        let mut history = PoseHistory::new(self.t, self.x.pose, self.p);
        history.extend(&steps)?;
        let last = steps.last().expect("propagate_batch rejects empty input");
        let (prior, p_prior, t_k) = (last.state_after, last.cov_after, last.t);
        timings.propagation = clock.elapsed();

        let clock = Instant::now();
        let options = UamcOptions {
            with_uncertainty: self.cfg.with_uamc,
            with_cross: self.cfg.with_cross_terms,
            lookup: self.cfg.pose_lookup,
        };
        let points = Undistorter::new(&history, self.cfg.ext, options)?.undistort_scan(scan)?;
        timings.undistortion = clock.elapsed();

        let clock = Instant::now();
        let (out, status) = if self.map.n_planes() == 0 {
            let out = update(&prior, &p_prior, &[], &self.cfg)?;
            (out, UpdateStatus::MapInitialized)
        } else {
            let viewpoint = prior.pose.trans;
            let corr: Vec<Correspondence> = points
                .iter()
                .filter_map(|p| {
                    let world = prior.pose.transform_point(&p.xyz);
                    self.map
                        .match_plane(&world, &viewpoint)
                        .map(|plane| Correspondence { point: *p, plane })
                })
                .collect();
            let out = update(&prior, &p_prior, &corr, &self.cfg)?;
            let status = if out.n_used > 0 {
                UpdateStatus::Updated
            } else {
                UpdateStatus::NoCorrespondences
            };
            (out, status)
        };
        timings.update = clock.elapsed();

        let clock = Instant::now();
        if status != UpdateStatus::NoCorrespondences {
            let world: Vec<Vector3<f64>> = points
                .iter()
                .map(|p| out.posterior.pose.transform_point(&p.xyz))
                .collect();
            self.map.insert_points(&world);
        }
        timings.map = clock.elapsed();

        self.x = out.posterior;
        self.p = out.p_post;
        self.t = t_k;
        Ok(ScanResult {
            t: t_k,
            posterior: out.posterior,
            p_post: out.p_post,
            n_points: points.len(),
            n_residuals: out.n_used,
            n_rejected: out.n_rejected,
            iterations: out.iterations,
            status,
            timings,
        })
    }
}

/// Filter variants compared in the end-to-end ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// SE(3) propagation with uncertainty-aware deskewing.
    Full,
    /// SE(3) propagation; points keep only their raw covariance.
    NoUamc,
    /// SO(3) x R^3 propagation without deskewing uncertainty.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoUamc, Ablation::Baseline];

    pub fn apply(self, cfg: &FilterConfig) -> FilterConfig {
        let mut out = *cfg;
        out.with_uamc = self == Ablation::Full;
        out.with_se3_propagation = self != Ablation::Baseline;
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoUamc => "no_uamc",
            Ablation::Baseline => "baseline",
        }
    }
}

/// Points of one sweep; `t_end` is the scan's reference time.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub t_end: f64,
    pub points: Vec<RawPoint>,
}

/// Runs a filter from `(x0, p0)` at `t0` over consecutive scans, cutting the
/// IMU stream at every scan end.
pub fn run_lio(
    cfg: FilterConfig,
    x0: NavState,
    p0: Matrix15,
    t0: f64,
    imu: Vec<ImuSample>,
    scans: &[Scan],
) -> Result<Vec<ScanResult>> {
    let mut filter = Filter::new(cfg, x0, p0, t0)?;
    let mut buffer = ImuBuffer::new(imu)?;
    buffer.take_until(t0)?;
    scans
        .iter()
        .enumerate()
        .map(|(index, scan)| {
            if !(scan.t_end > filter.time()) {
                return Err(Error::NonMonotoneTime {
                    index,
                    prev: filter.time(),
                    t: scan.t_end,
                });
            }
            let samples = buffer.take_scan(index, scan.t_end)?;
            filter.process_scan(&samples, &scan.points)
        })
        .collect()
}

/// Propagation and deskewing without any measurement update: the nominal
/// state follows the IMU alone, and every scan is undistorted into the IMU
/// frame at its end time.
pub fn undistort_stream(
    cfg: &FilterConfig,
    x0: NavState,
    p0: Matrix15,
    t0: f64,
    imu: Vec<ImuSample>,
    scans: &[Scan],
) -> Result<Vec<Vec<ProbabilisticPoint>>> {
    cfg.validate()?;
    let options = UamcOptions {
        with_uncertainty: cfg.with_uamc,
        with_cross: cfg.with_cross_terms,
        lookup: cfg.pose_lookup,
    };
    let mut buffer = ImuBuffer::new(imu)?;
    buffer.take_until(t0)?;
    let (mut x, mut p, mut t) = (x0, p0, t0);
    let mut out = Vec::with_capacity(scans.len());
    for (index, scan) in scans.iter().enumerate() {
        if !(scan.t_end > t) {
            return Err(Error::NonMonotoneTime {
                index,
                prev: t,
                t: scan.t_end,
            });
        }
        let samples = buffer.take_scan(index, scan.t_end)?;
        let steps = propagate_batch(&x, &p, t, &samples, &cfg.imu_noise, cfg.propagation_model())?;
        let mut history = PoseHistory::new(t, x.pose, p);
        history.extend(&steps)?;
        out.push(Undistorter::new(&history, cfg.ext, options)?.undistort_scan(&scan.points)?);
        let last = steps.last().expect("propagate_batch rejects empty input");
        (x, p, t) = (last.state_after, last.cov_after, last.t);
    }
    Ok(out)
}
