//! Discrete IMU propagation on SE(3) and on SO(3) x R^3, with the analytic
//! error-state Jacobians of the SE(3) model.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::liegroup::{
    adjoint, se3_exp, se3_right_jacobian, skew, so3_exp, so3_left_jacobian, Twist6,
    RENORMALIZE_EVERY,
};
use crate::state::{
    discrete_process_noise, BaselineNavState, ImuNoiseParams, ImuSample, Matrix12, Matrix15,
    Matrix15x12, NavState, Vector12, IDX_BA, IDX_BG, IDX_ROT, IDX_TRANS, IDX_VEL, NOISE_ACC,
    NOISE_BA, NOISE_BG, NOISE_GYRO,
};

/// Which discrete kinematic model drives the nominal state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PropagationModel {
    /// Pose advanced by `Exp(xi dt)` on SE(3).
    #[default]
    Se3,
    /// Rotation and translation advanced separately.
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationStep {
    /// Time at the end of the step.
    pub t: f64,
    pub dt: f64,
    pub state_after: NavState,
    pub f_x: Matrix15,
    pub f_w: Matrix15x12,
    /// Discrete process-noise covariance used for this step.
    pub q: Matrix12,
    pub cov_after: Matrix15,
}

/// SE(3) model with process noise `w` injected as integrated increments.
///
/// With `w = 0` this is [`propagate_se3`].
pub fn propagate_se3_with_noise(
    x: &NavState,
    u: &ImuSample,
    p: &ImuNoiseParams,
    w: &Vector12,
    dt: f64,
) -> NavState {
    let n_gyro: Vector3<f64> = w.fixed_rows::<3>(NOISE_GYRO).into_owned();
    let n_acc: Vector3<f64> = w.fixed_rows::<3>(NOISE_ACC).into_owned();
    let n_bg: Vector3<f64> = w.fixed_rows::<3>(NOISE_BG).into_owned();
    let n_ba: Vector3<f64> = w.fixed_rows::<3>(NOISE_BA).into_owned();

    let phi = (u.gyro - x.bias_gyro) * dt - n_gyro;
    let dv_meas = (u.acc - x.bias_acc) * dt - n_acc;
    let g_body = x.pose.rot.transpose() * p.gravity();

    let pose = x.pose * se3_exp(&Twist6::new(x.vel_body * dt, phi));
    let vel_body = so3_exp(&-phi) * (x.vel_body + dv_meas + g_body * dt);
    NavState {
        pose,
        vel_body,
        bias_gyro: x.bias_gyro + n_bg,
        bias_acc: x.bias_acc + n_ba,
    }
}

pub fn propagate_se3(x: &NavState, u: &ImuSample, p: &ImuNoiseParams, dt: f64) -> NavState {
    propagate_se3_with_noise(x, u, p, &Vector12::zeros(), dt)
}

pub fn propagate_baseline(
    x: &BaselineNavState,
    u: &ImuSample,
    p: &ImuNoiseParams,
    dt: f64,
) -> BaselineNavState {
    let w_hat = u.gyro - x.bias_gyro;
    let a_hat = u.acc - x.bias_acc;
    BaselineNavState {
        rot: x.rot * so3_exp(&(w_hat * dt)),
        trans: x.trans + x.vel_world * dt,
        vel_world: x.vel_world + (x.rot * a_hat + p.gravity()) * dt,
        bias_gyro: x.bias_gyro,
        bias_acc: x.bias_acc,
    }
}

/// Propagates with the chosen model, returning a [`NavState`] either way.
pub fn propagate_nominal(
    model: PropagationModel,
    x: &NavState,
    u: &ImuSample,
    p: &ImuNoiseParams,
    dt: f64,
) -> NavState {
    match model {
        PropagationModel::Se3 => propagate_se3(x, u, p, dt),
        PropagationModel::Baseline => propagate_baseline(&x.to_baseline(), u, p, dt).to_nav(),
    }
}

/// Jacobians of `f(x ⊞ dx, u, w, dt) ⊟ f(x, u, 0, dt)` at `dx = 0`, `w = 0`.
pub fn error_jacobians(
    x: &NavState,
    u: &ImuSample,
    p: &ImuNoiseParams,
    dt: f64,
) -> (Matrix15, Matrix15x12) {
    let phi = (u.gyro - x.bias_gyro) * dt;
    let eta = Twist6::new(x.vel_body * dt, phi);
    let ad_inv = adjoint(&se3_exp(&eta).inverse());
    let jr = se3_right_jacobian(&eta);
    let jr_lin = jr.fixed_view::<6, 3>(0, 0).into_owned();
    let jr_ang = jr.fixed_view::<6, 3>(0, 3).into_owned();

    let rot_inc_inv = *so3_exp(&-phi).matrix();
    let g_body = x.pose.rot.transpose() * p.gravity();
    let pre = x.vel_body + (u.acc - x.bias_acc) * dt + g_body * dt;
    // d v' / d phi
    let dv_dphi = rot_inc_inv * skew(&pre) * so3_left_jacobian(&phi);

    let mut f_x = Matrix15::zeros();
    f_x.fixed_view_mut::<6, 6>(IDX_TRANS, IDX_TRANS)
        .copy_from(&ad_inv);
    f_x.fixed_view_mut::<6, 3>(IDX_TRANS, IDX_VEL)
        .copy_from(&(jr_lin * dt));
    f_x.fixed_view_mut::<6, 3>(IDX_TRANS, IDX_BG)
        .copy_from(&(-jr_ang * dt));

    f_x.fixed_view_mut::<3, 3>(IDX_VEL, IDX_ROT)
        .copy_from(&(rot_inc_inv * skew(&g_body) * dt));
    f_x.fixed_view_mut::<3, 3>(IDX_VEL, IDX_VEL)
        .copy_from(&rot_inc_inv);
    f_x.fixed_view_mut::<3, 3>(IDX_VEL, IDX_BG)
        .copy_from(&(-dv_dphi * dt));
    f_x.fixed_view_mut::<3, 3>(IDX_VEL, IDX_BA)
        .copy_from(&(-rot_inc_inv * dt));

    f_x.fixed_view_mut::<3, 3>(IDX_BG, IDX_BG)
        .copy_from(&Matrix3::identity());
    f_x.fixed_view_mut::<3, 3>(IDX_BA, IDX_BA)
        .copy_from(&Matrix3::identity());

    let mut f_w = Matrix15x12::zeros();
    f_w.fixed_view_mut::<6, 3>(IDX_TRANS, NOISE_GYRO)
        .copy_from(&(-jr_ang));
    f_w.fixed_view_mut::<3, 3>(IDX_VEL, NOISE_GYRO)
        .copy_from(&(-dv_dphi));
    f_w.fixed_view_mut::<3, 3>(IDX_VEL, NOISE_ACC)
        .copy_from(&(-rot_inc_inv));
    f_w.fixed_view_mut::<3, 3>(IDX_BG, NOISE_BG)
        .copy_from(&Matrix3::identity());
    f_w.fixed_view_mut::<3, 3>(IDX_BA, NOISE_BA)
        .copy_from(&Matrix3::identity());

    (f_x, f_w)
}

/// `F_x P F_x^T + F_w Q F_w^T`, symmetrized.
pub fn propagate_covariance(
    p: &Matrix15,
    f_x: &Matrix15,
    f_w: &Matrix15x12,
    q: &Matrix12,
) -> Matrix15 {
    let out = f_x * p * f_x.transpose() + f_w * q * f_w.transpose();
    (out + out.transpose()) * 0.5
}

/// Runs propagation over a stream of samples starting from `x0` at `t0`.
///
/// Sample `i` drives the interval `(t_{i-1}, t_i]`, with `t_{-1} = t0`.
pub fn propagate_batch(
    x0: &NavState,
    p0: &Matrix15,
    t0: f64,
    imu: &[ImuSample],
    noise: &ImuNoiseParams,
    model: PropagationModel,
) -> Result<Vec<PropagationStep>> {
    if imu.is_empty() {
        return Err(Error::EmptyInput("imu samples"));
    }
    let mut steps = Vec::with_capacity(imu.len());
    let mut x = *x0;
    let mut cov = *p0;
    let mut t_prev = t0;
    for (index, u) in imu.iter().enumerate() {
        if !(u.t > t_prev) {
            return Err(Error::NonMonotoneTime {
                index,
                prev: t_prev,
                t: u.t,
            });
        }
        let dt = u.t - t_prev;
        let (f_x, f_w) = error_jacobians(&x, u, noise, dt);
        let q = discrete_process_noise(noise, dt);
        cov = propagate_covariance(&cov, &f_x, &f_w, &q);
        x = propagate_nominal(model, &x, u, noise, dt);
        if (index + 1) % RENORMALIZE_EVERY == 0 {
            x.pose = x.pose.renormalized();
        }
        steps.push(PropagationStep {
            t: u.t,
            dt,
            state_after: x,
            f_x,
            f_w,
            q,
            cov_after: cov,
        });
        t_prev = u.t;
    }
    Ok(steps)
}
