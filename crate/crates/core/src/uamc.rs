//! Uncertainty-aware motion compensation.
//!
//! Every LiDAR point is moved into the IMU frame at the scan end `t_k` with
//! the relative transform `T_k^-1 T(rho_j)`, and receives the covariance
//!
//! ```text
//! cov = A Sigma_rel A^T + R Sigma_raw R^T,   A = R_rel [I, -p^]
//! ```
//!
//! where `p` is the point in the IMU frame at its acquisition time and `R`
//! composes the relative and extrinsic rotations.

use nalgebra::{Matrix3, SMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointcov::{PoseHistory, RelCovResult};
use crate::liegroup::{dot_operator, homogeneous, se3_exp, se3_log, so3_exp, so3_log, Pose3};

/// Default isotropic raw LiDAR noise, m.
pub const DEFAULT_RAW_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    /// Sensor frame, m.
    pub xyz: Vector3<f64>,
    /// Acquisition time, s.
    pub t: f64,
    pub sigma_raw: Matrix3<f64>,
}

impl RawPoint {
    pub fn new(xyz: Vector3<f64>, t: f64, sigma_raw: Matrix3<f64>) -> Self {
        RawPoint { xyz, t, sigma_raw }
    }

    pub fn isotropic(xyz: Vector3<f64>, t: f64, sigma: f64) -> Self {
        RawPoint {
            xyz,
            t,
            sigma_raw: Matrix3::identity() * (sigma * sigma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbabilisticPoint {
    /// IMU frame at the scan end, m.
    pub xyz: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ExtrinsicRepr", into = "ExtrinsicRepr")]
pub struct ExtrinsicCalib {
    /// IMU-from-LiDAR.
    pub t_imu_lidar: Pose3,
}

/// Config form: translation in m, rotation as a rotation vector in rad.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExtrinsicRepr {
    translation: [f64; 3],
    rotation_vector: [f64; 3],
}

impl Default for ExtrinsicRepr {
    fn default() -> Self {
        ExtrinsicRepr {
            translation: [0.0; 3],
            rotation_vector: [0.0; 3],
        }
    }
}

impl From<ExtrinsicRepr> for ExtrinsicCalib {
    fn from(r: ExtrinsicRepr) -> Self {
        let rot = so3_exp(&Vector3::from(r.rotation_vector));
        ExtrinsicCalib {
            t_imu_lidar: Pose3::new(rot, Vector3::from(r.translation)),
        }
    }
}

impl From<ExtrinsicCalib> for ExtrinsicRepr {
    fn from(e: ExtrinsicCalib) -> Self {
        ExtrinsicRepr {
            translation: e.t_imu_lidar.trans.into(),
            rotation_vector: so3_log(&e.t_imu_lidar.rot).into(),
        }
    }
}

impl Default for ExtrinsicCalib {
    fn default() -> Self {
        ExtrinsicCalib {
            t_imu_lidar: Pose3::identity(),
        }
    }
}

/// How the pose at a point's timestamp is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseLookup {
    /// Geodesic interpolation between the bracketing entries.
    #[default]
    Interpolate,
    /// Pose of the entry at or before the timestamp.
    SnapLeft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UamcOptions {
    /// Propagate relative-transform uncertainty into the point covariance.
    /// When off, points are still deskewed but carry only raw noise.
    pub with_uncertainty: bool,
    pub with_cross: bool,
    pub lookup: PoseLookup,
}

impl Default for UamcOptions {
    fn default() -> Self {
        UamcOptions {
            with_uncertainty: true,
            with_cross: true,
            lookup: PoseLookup::Interpolate,
        }
    }
}

/// Pose at time `rho` and the index `i` with `t_i <= rho < t_{i+1}`.
pub fn pose_at_time(h: &PoseHistory, rho: f64) -> Result<(Pose3, usize)> {
    pose_lookup(h, rho, PoseLookup::Interpolate)
}

pub fn pose_lookup(h: &PoseHistory, rho: f64, lookup: PoseLookup) -> Result<(Pose3, usize)> {
    let entries = h.entries();
    let (start, end) = (h.start_time(), h.end_time());
    if !(rho >= start && rho <= end) {
        return Err(Error::TimeOutOfSpan { t: rho, start, end });
    }
    let i = entries.partition_point(|e| e.t <= rho) - 1;
    let left = &entries[i];
    if i + 1 == entries.len() || lookup == PoseLookup::SnapLeft || rho == left.t {
        return Ok((left.pose, i));
    }
    let right = &entries[i + 1];
    let s = (rho - left.t) / (right.t - left.t);
    let delta = se3_log(&(left.pose.inverse() * right.pose));
    Ok((left.pose * se3_exp(&delta.scaled(s)), i))
}

/// Deskews points of one scan against a fixed pose history.
///
/// Relative covariances are computed once per history entry.
pub struct Undistorter<'a> {
    history: &'a PoseHistory,
    ext: ExtrinsicCalib,
    options: UamcOptions,
    rel: Vec<RelCovResult>,
}

impl<'a> Undistorter<'a> {
    pub fn new(
        history: &'a PoseHistory,
        ext: ExtrinsicCalib,
        options: UamcOptions,
    ) -> Result<Self> {
        let rel = (0..history.len())
            .map(|j| history.relative_cov(j, options.with_cross))
            .collect::<Result<Vec<_>>>()?;
        Ok(Undistorter {
            history,
            ext,
            options,
            rel,
        })
    }

    pub fn relative(&self, j: usize) -> &RelCovResult {
        &self.rel[j]
    }

    /// Number of entries whose relative covariance needed a non-trivial PSD repair.
    pub fn psd_repairs(&self) -> usize {
        self.rel.iter().filter(|r| r.psd_repaired).count()
    }

    pub fn undistort(&self, pt: &RawPoint) -> Result<ProbabilisticPoint> {
        let (pose_j, i) = pose_lookup(self.history, pt.t, self.options.lookup)?;
        let rel_pose = self.history.latest().pose.inverse() * pose_j;
        let p_imu = self.ext.t_imu_lidar.transform_point(&pt.xyz);
        let xyz = rel_pose.transform_point(&p_imu);

        let rot = rel_pose.rot.matrix() * self.ext.t_imu_lidar.rot.matrix();
        let mut cov = rot * pt.sigma_raw * rot.transpose();
        if self.options.with_uncertainty {
            let sigma_rel = self.rel[i].cov.matrix();
            let a: SMatrix<f64, 3, 6> =
                rel_pose.rot.matrix() * dot_operator(&homogeneous(&p_imu)).fixed_view::<3, 6>(0, 0);
            cov += a * sigma_rel * a.transpose();
        }
        Ok(ProbabilisticPoint {
            xyz,
            cov: (cov + cov.transpose()) * 0.5,
            t: pt.t,
        })
    }

    /// Order-preserving batch form; the first out-of-span point is reported by index.
    pub fn undistort_scan(&self, scan: &[RawPoint]) -> Result<Vec<ProbabilisticPoint>> {
        let (start, end) = (self.history.start_time(), self.history.end_time());
        if let Some((index, p)) = scan
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.t >= start && p.t <= end))
        {
            return Err(Error::PointOutOfSpan {
                index,
                t: p.t,
                start,
                end,
            });
        }
        scan.par_iter().map(|p| self.undistort(p)).collect()
    }
}

pub fn undistort_point(
    pt: &RawPoint,
    h: &PoseHistory,
    ext: &ExtrinsicCalib,
    with_cross: bool,
) -> Result<ProbabilisticPoint> {
    let options = UamcOptions {
        with_cross,
        ..Default::default()
    };
    Undistorter::new(h, *ext, options)?.undistort(pt)
}

pub fn undistort_scan(
    scan: &[RawPoint],
    h: &PoseHistory,
    ext: &ExtrinsicCalib,
    with_cross: bool,
) -> Result<Vec<ProbabilisticPoint>> {
    let options = UamcOptions {
        with_cross,
        ..Default::default()
    };
    Undistorter::new(h, *ext, options)?.undistort_scan(scan)
}
