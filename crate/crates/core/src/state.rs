//! Filter state, 15-dimensional error state and IMU noise model.
//!
//! Error-state layout:
//! ```text
//!  [0..3]   pose perturbation, linear part (m)
//!  [3..6]   pose perturbation, angular part (rad)
//!  [6..9]   body velocity (m/s)
//!  [9..12]  gyro bias (rad/s)
//!  [12..15] accel bias (m/s^2)
//! ```
//! The pose perturbation is applied on the right: `T = T_hat * Exp(dpose)`.
//!
//! Process noise `w` is 12-dimensional: gyro, accel, gyro-bias walk and
//! accel-bias walk, each expressed as the increment integrated over one step
//! (rad, m/s, rad/s, m/s^2). With densities `sigma` its covariance is
//! `sigma^2 * dt` on every block.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{se3_exp, se3_log, Pose3, Rot3, Twist6};

pub type Vector15 = SVector<f64, 15>;
pub type Vector12 = SVector<f64, 12>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix15x12 = SMatrix<f64, 15, 12>;

pub const IDX_TRANS: usize = 0;
pub const IDX_ROT: usize = 3;
pub const IDX_VEL: usize = 6;
pub const IDX_BG: usize = 9;
pub const IDX_BA: usize = 12;

pub const NOISE_GYRO: usize = 0;
pub const NOISE_ACC: usize = 3;
pub const NOISE_BG: usize = 6;
pub const NOISE_BA: usize = 9;

/// Rotation distance from pi at which `boxminus` refuses to produce a chart.
pub const CHART_MARGIN: f64 = 1e-6;

/// Full filter state: world-from-body pose, body-frame velocity, biases.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NavState {
    pub pose: Pose3,
    pub vel_body: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
}

impl NavState {
    pub fn new(pose: Pose3, vel_body: Vector3<f64>) -> Self {
        NavState {
            pose,
            vel_body,
            bias_gyro: Vector3::zeros(),
            bias_acc: Vector3::zeros(),
        }
    }

    pub fn vel_world(&self) -> Vector3<f64> {
        self.pose.rot * self.vel_body
    }

    pub fn to_baseline(&self) -> BaselineNavState {
        BaselineNavState {
            rot: self.pose.rot,
            trans: self.pose.trans,
            vel_world: self.vel_world(),
            bias_gyro: self.bias_gyro,
            bias_acc: self.bias_acc,
        }
    }

    pub fn boxplus(&self, dx: &ErrorState15) -> NavState {
        boxplus(self, dx)
    }

    pub fn boxminus(&self, other: &NavState) -> Result<ErrorState15> {
        boxminus(self, other)
    }
}

/// State of the conventional SO(3) x R^3 model with world-frame velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineNavState {
    pub rot: Rot3,
    pub trans: Vector3<f64>,
    pub vel_world: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
}

impl BaselineNavState {
    pub fn pose(&self) -> Pose3 {
        Pose3::new(self.rot, self.trans)
    }

    pub fn to_nav(&self) -> NavState {
        NavState {
            pose: self.pose(),
            vel_body: self.rot.transpose() * self.vel_world,
            bias_gyro: self.bias_gyro,
            bias_acc: self.bias_acc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorState15 {
    pub dpose: Twist6,
    pub dvel: Vector3<f64>,
    pub dbg: Vector3<f64>,
    pub dba: Vector3<f64>,
}

impl ErrorState15 {
    pub fn zero() -> Self {
        ErrorState15::default()
    }

    pub fn from_vector(x: &Vector15) -> Self {
        ErrorState15 {
            dpose: Twist6::new(
                x.fixed_rows::<3>(IDX_TRANS).into_owned(),
                x.fixed_rows::<3>(IDX_ROT).into_owned(),
            ),
            dvel: x.fixed_rows::<3>(IDX_VEL).into_owned(),
            dbg: x.fixed_rows::<3>(IDX_BG).into_owned(),
            dba: x.fixed_rows::<3>(IDX_BA).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector15 {
        let mut x = Vector15::zeros();
        x.fixed_rows_mut::<3>(IDX_TRANS).copy_from(&self.dpose.v);
        x.fixed_rows_mut::<3>(IDX_ROT).copy_from(&self.dpose.w);
        x.fixed_rows_mut::<3>(IDX_VEL).copy_from(&self.dvel);
        x.fixed_rows_mut::<3>(IDX_BG).copy_from(&self.dbg);
        x.fixed_rows_mut::<3>(IDX_BA).copy_from(&self.dba);
        x
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// `x ⊞ dx`.
pub fn boxplus(x: &NavState, dx: &ErrorState15) -> NavState {
    NavState {
        pose: x.pose * se3_exp(&dx.dpose),
        vel_body: x.vel_body + dx.dvel,
        bias_gyro: x.bias_gyro + dx.dbg,
        bias_acc: x.bias_acc + dx.dba,
    }
}

/// `x ⊟ y`, the error state taking `y` to `x`.
pub fn boxminus(x: &NavState, y: &NavState) -> Result<ErrorState15> {
    let rel = y.pose.inverse() * x.pose;
    let angle = rel.rot.angle();
    if angle >= std::f64::consts::PI - CHART_MARGIN {
        return Err(Error::OutOfChart { angle });
    }
    Ok(ErrorState15 {
        dpose: se3_log(&rel),
        dvel: x.vel_body - y.vel_body,
        dbg: x.bias_gyro - y.bias_gyro,
        dba: x.bias_acc - y.bias_acc,
    })
}

/// One IMU reading. In a stream, a sample stands for the interval that ends
/// at its timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, acc: Vector3<f64>) -> Self {
        ImuSample { t, gyro, acc }
    }
}

/// Checks that timestamps are strictly increasing.
pub fn check_monotone(samples: &[ImuSample]) -> Result<()> {
    for (index, pair) in samples.windows(2).enumerate() {
        if !(pair[1].t > pair[0].t) {
            return Err(Error::NonMonotoneTime {
                index: index + 1,
                prev: pair[0].t,
                t: pair[1].t,
            });
        }
    }
    Ok(())
}

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

/// Continuous-time noise densities and gravity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoiseParams {
    /// rad/s/sqrt(Hz)
    pub sigma_gyro: f64,
    /// m/s^2/sqrt(Hz)
    pub sigma_acc: f64,
    /// rad/s^2/sqrt(Hz)
    pub sigma_bg_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub sigma_ba_walk: f64,
    /// World-frame gravity, m/s^2.
    pub gravity: [f64; 3],
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        ImuNoiseParams {
            sigma_gyro: 0.0,
            sigma_acc: 0.0,
            sigma_bg_walk: 0.0,
            sigma_ba_walk: 0.0,
            gravity: DEFAULT_GRAVITY,
        }
    }
}

impl ImuNoiseParams {
    pub fn noiseless() -> Self {
        ImuNoiseParams::default()
    }

    /// Densities of a consumer-grade MEMS unit.
    pub fn typical() -> Self {
        ImuNoiseParams {
            sigma_gyro: 0.01,
            sigma_acc: 0.1,
            sigma_bg_walk: 1e-4,
            sigma_ba_walk: 1e-3,
            gravity: DEFAULT_GRAVITY,
        }
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.sigma_gyro,
            self.sigma_acc,
            self.sigma_bg_walk,
            self.sigma_ba_walk,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "noise densities must be finite and >= 0, got {sigmas:?}"
            )));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter("gravity must be finite".into()));
        }
        Ok(())
    }
}

/// Discrete covariance of the integrated process noise over `dt`.
pub fn discrete_process_noise(p: &ImuNoiseParams, dt: f64) -> Matrix12 {
    let mut q = Matrix12::zeros();
    let blocks = [
        (NOISE_GYRO, p.sigma_gyro),
        (NOISE_ACC, p.sigma_acc),
        (NOISE_BG, p.sigma_bg_walk),
        (NOISE_BA, p.sigma_ba_walk),
    ];
    for (offset, sigma) in blocks {
        for i in 0..3 {
            q[(offset + i, offset + i)] = sigma * sigma * dt;
        }
    }
    q
}
