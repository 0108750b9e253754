//! SO(3) / SE(3) primitives.
//!
//! Rotations are stored as 3x3 matrices. Tangent vectors of SE(3) are
//! ordered `(linear, angular)` everywhere in the crate, so a twist
//! `xi = [v; w]` acts on a homogeneous point `p = [rho; eta]` as
//! `xi^ p = [w x rho + eta v; 0]`.
//!
//! Every closed-form coefficient switches to its Taylor expansion below
//! [`SMALL_ANGLE`], where both branches agree to double-precision roundoff.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector4, Vector6};

pub type Matrix4x6 = SMatrix<f64, 4, 6>;

/// Rotation angle below which closed forms are replaced by series.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Angle below which the SE(3) Jacobian coupling block uses its series.
/// Its fourth coefficient cancels catastrophically well above `SMALL_ANGLE`.
const SE3_JAC_SERIES_ANGLE: f64 = 0.1;

/// Number of compositions after which accumulated rotations are
/// re-orthonormalized by integrators.
pub const RENORMALIZE_EVERY: usize = 1000;

/// Skew-symmetric matrix with `skew(a) * b == a.cross(&b)`.
#[inline]
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3(Matrix3<f64>);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rot3(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation (polar
    /// decomposition).
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rot3(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn renormalized(&self) -> Self {
        Rot3::from_matrix_projected(&self.0)
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol && (self.0.determinant() - 1.0).abs() < tol
    }

    pub fn exp(w: &Vector3<f64>) -> Self {
        so3_exp(w)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rot3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rot3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// A rigid transform `[R t; 0 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3 {
    pub rot: Rot3,
    pub trans: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Pose3::identity()
    }
}

impl Pose3 {
    pub fn new(rot: Rot3, trans: Vector3<f64>) -> Self {
        Pose3 { rot, trans }
    }

    pub fn identity() -> Self {
        Pose3 {
            rot: Rot3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn from_translation(trans: Vector3<f64>) -> Self {
        Pose3 {
            rot: Rot3::identity(),
            trans,
        }
    }

    pub fn from_rotation(rot: Rot3) -> Self {
        Pose3 {
            rot,
            trans: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Pose3 {
            rot: rt,
            trans: -(rt.0 * self.trans),
        }
    }

    pub fn compose(&self, other: &Pose3) -> Self {
        Pose3 {
            rot: Rot3(self.rot.0 * other.rot.0),
            trans: self.rot.0 * other.trans + self.trans,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.0 * p + self.trans
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Pose3 {
            rot: Rot3(m.fixed_view::<3, 3>(0, 0).into_owned()),
            trans: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn renormalized(&self) -> Self {
        Pose3 {
            rot: self.rot.renormalized(),
            trans: self.trans,
        }
    }

    pub fn exp(xi: &Twist6) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist6 {
        se3_log(self)
    }

    pub fn adjoint(&self) -> Matrix6<f64> {
        adjoint(self)
    }

    /// `Log(self^-1 * other)`, the right-perturbation taking `self` to `other`.
    pub fn between(&self, other: &Pose3) -> Twist6 {
        se3_log(&self.inverse().compose(other))
    }

    /// Chordal distance `||T_a - T_b||_F` split into translation and rotation parts.
    pub fn chordal_parts(&self, other: &Pose3) -> (f64, f64) {
        (
            (self.trans - other.trans).norm(),
            (self.rot.0 - other.rot.0).norm(),
        )
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl Mul<&Pose3> for &Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: &Pose3) -> Pose3 {
        self.compose(rhs)
    }
}

/// Body twist `(v, w)`; with a time step this is also an SE(3) tangent vector.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist6 {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist6 {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist6 { v, w }
    }

    pub fn zero() -> Self {
        Twist6::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist6 {
            v: x.fixed_rows::<3>(0).into_owned(),
            w: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.v);
        x.fixed_rows_mut::<3>(3).copy_from(&self.w);
        x
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist6 {
            v: self.v * s,
            w: self.w * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// 4x4 se(3) matrix `[w^ v; 0 0]`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.w));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m
    }
}

/// Tangent-space covariance of a pose, `(linear, angular)` ordering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov6(Matrix6<f64>);

impl Cov6 {
    pub fn zeros() -> Self {
        Cov6(Matrix6::zeros())
    }

    /// Wraps a matrix after symmetrizing it.
    pub fn from_matrix(m: Matrix6<f64>) -> Self {
        Cov6(symmetrize6(&m))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.symmetric_eigenvalues().min()
    }
}

fn symmetrize6(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

/// `sin(t)/t`, `(1-cos t)/t^2`, `(t - sin t)/t^3` for `t = |w|`.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        so3_coefficients_series(theta)
    } else {
        so3_coefficients_closed(theta)
    }
}

fn so3_coefficients_series(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
}

fn so3_coefficients_closed(theta: f64) -> (f64, f64, f64) {
    let s = theta.sin();
    let half_sin = (0.5 * theta).sin();
    let t2 = theta * theta;
    (
        s / theta,
        2.0 * half_sin * half_sin / t2,
        (theta - s) / (t2 * theta),
    )
}

/// Coefficient of `w^2` in the inverse left Jacobian.
fn so3_inv_jacobian_coefficient(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        1.0 / (theta * theta) - half.cos() / (2.0 * theta * half.sin())
    }
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Rot3 {
    let theta = w.norm();
    let (a, b, _) = so3_coefficients(theta);
    let k = skew(w);
    Rot3(Matrix3::identity() + k * a + k * k * b)
}

/// Rotation vector with angle in `[0, pi]`.
///
/// Near `pi` the axis is recovered from the symmetric part; at exactly `pi`
/// the sign is fixed so that the largest-magnitude axis component is
/// non-negative.
pub fn so3_log(r: &Rot3) -> Vector3<f64> {
    let m = &r.0;
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let skew_part = vee(&(m - m.transpose())) * 0.5; // sin(theta) * axis

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return skew_part * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return skew_part * (theta / theta.sin());
    }

    // (R + R^T)/2 = cos(theta) I + (1 - cos(theta)) a a^T
    let sym = (m + m.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let diag = aat.diagonal();
    let mut col = 0;
    for i in 1..3 {
        if diag[i] > diag[col] {
            col = i;
        }
    }
    let mut axis: Vector3<f64> = aat.column(col).into_owned();
    axis /= axis.norm();
    let s = skew_part.dot(&axis);
    if s.abs() > 1e-12 {
        if s < 0.0 {
            axis = -axis;
        }
    } else {
        let mut big = 0;
        for i in 1..3 {
            if axis[i].abs() > axis[big].abs() + 1e-12 {
                big = i;
            }
        }
        if axis[big] < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// Left Jacobian of the SO(3) exponential.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let (_, b, c) = so3_coefficients(theta);
    let k = skew(w);
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-w)
}

/// Inverse of [`so3_left_jacobian`], valid for `|w| < 2 pi`.
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    Matrix3::identity() - k * 0.5 + k * k * so3_inv_jacobian_coefficient(theta)
}

pub fn se3_exp(xi: &Twist6) -> Pose3 {
    Pose3 {
        rot: so3_exp(&xi.w),
        trans: so3_left_jacobian(&xi.w) * xi.v,
    }
}

pub fn se3_log(p: &Pose3) -> Twist6 {
    let w = so3_log(&p.rot);
    Twist6 {
        v: so3_left_jacobian_inv(&w) * p.trans,
        w,
    }
}

/// `[R, t^ R; 0, R]`.
pub fn adjoint(p: &Pose3) -> Matrix6<f64> {
    let r = p.rot.0;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&p.trans) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

/// se(3) adjoint `ad(xi) = [w^, v^; 0, w^]`, so `ad(a) b` is the Lie bracket.
pub fn curly_wedge(xi: &Twist6) -> Matrix6<f64> {
    let wx = skew(&xi.w);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wx);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&xi.v));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wx);
    m
}

/// `p^⊙` with `xi.hat() * p == dot_operator(p) * xi`.
pub fn dot_operator(ph: &Vector4<f64>) -> Matrix4x6 {
    let rho = Vector3::new(ph.x, ph.y, ph.z);
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * ph.w));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&rho)));
    m
}

/// Embeds a 3D noise vector as a homogeneous direction.
pub fn dilation(n: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(n.x, n.y, n.z, 0.0)
}

pub fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}

/// Left Jacobian of the SE(3) exponential, `(linear, angular)` ordering:
/// `[J_l(w), Q(v, w); 0, J_l(w)]`.
pub fn se3_left_jacobian(xi: &Twist6) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.w);
    let q = se3_coupling_block(&xi.v, &xi.w);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    m
}

/// Right Jacobian: `Exp(xi + d) ~ Exp(xi) Exp(J_r(xi) d)`.
pub fn se3_right_jacobian(xi: &Twist6) -> Matrix6<f64> {
    se3_left_jacobian(&xi.scaled(-1.0))
}

fn se3_coupling_block(v: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let (c2, c3, c4) = se3_coupling_coefficients(w.norm());
    let vx = skew(v);
    let wx = skew(w);
    let wv = wx * vx;
    let vw = vx * wx;
    let wvw = wv * wx;
    vx * 0.5
        + (wv + vw + wvw) * c2
        + (wx * wv + vw * wx - wvw * 3.0) * c3
        + (wvw * wx + wx * wvw) * c4
}

fn se3_coupling_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SE3_JAC_SERIES_ANGLE {
        se3_coupling_series(theta)
    } else {
        se3_coupling_closed(theta)
    }
}

fn se3_coupling_series(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    let t4 = t2 * t2;
    let t6 = t4 * t2;
    (
        1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362_880.0,
        1.0 / 24.0 - t2 / 720.0 + t4 / 40_320.0 - t6 / 3_628_800.0,
        1.0 / 120.0 - t2 / 2520.0 + t4 / 120_960.0 - t6 / 9_979_200.0,
    )
}

fn se3_coupling_closed(theta: f64) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let t4 = t2 * t2;
    let t5 = t4 * theta;
    let c2 = (theta - s) / t3;
    let c3 = (t2 * 0.5 + c - 1.0) / t4;
    let c4 = 0.5 * (c3 + 3.0 * (theta - s - t3 / 6.0) / t5);
    (c2, c3, c4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Truncated power series of the matrix exponential.
    fn expm_series(a: &Matrix3<f64>, terms: usize) -> Matrix3<f64> {
        let mut sum = Matrix3::identity();
        let mut term = Matrix3::identity();
        for k in 1..terms {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    /// `(1/theta) int_0^theta exp(s a^) ds` by composite Simpson on the unit axis.
    fn left_jacobian_quadrature(w: &Vector3<f64>) -> Matrix3<f64> {
        let n = 2000;
        let h = 1.0 / n as f64;
        let mut acc = Matrix3::zeros();
        for i in 0..=n {
            let s = i as f64 * h;
            let weight = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += expm_series(&skew(&(w * s)), 30) * weight;
        }
        acc * (h / 3.0)
    }

    #[test]
    fn so3_exp_identity_and_quarter_turn() {
        assert_eq!(so3_exp(&Vector3::zeros()), Rot3::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let y = r * Vector3::x();
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn so3_exp_matches_series() {
        let w = Vector3::new(0.3, -0.2, 0.5);
        let expected = expm_series(&skew(&w), 20);
        assert!((so3_exp(&w).matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn so3_log_cases() {
        assert_eq!(so3_log(&Rot3::identity()), Vector3::zeros());
        let w = Vector3::new(1.0, -2.0, 2.0); // |w| = 3
        assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-9);
        let half_turn =
            Rot3::from_matrix_unchecked(Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
        assert!((so3_log(&half_turn) - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
        let neg = Vector3::new(0.0, -PI, 0.0);
        assert!((so3_log(&so3_exp(&neg)) - Vector3::new(0.0, PI, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn so3_log_near_pi_branch() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for eps in [1e-4, 1e-6, 1e-8] {
            let w = axis * (PI - eps);
            let back = so3_log(&so3_exp(&w));
            assert!((back - w).norm() < 1e-8, "eps {eps}: {back:?}");
        }
    }

    #[test]
    fn left_jacobian_against_quadrature() {
        assert_eq!(so3_left_jacobian(&Vector3::zeros()), Matrix3::identity());
        let w = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let oracle = left_jacobian_quadrature(&w);
        assert!((so3_left_jacobian(&w) - oracle).norm() < 1e-8);
        let w2 = Vector3::new(0.4, -1.1, 0.7);
        assert!((so3_left_jacobian(&w2) * w2 - w2).norm() < 1e-14);
        assert!((so3_left_jacobian(&w2) - left_jacobian_quadrature(&w2)).norm() < 1e-8);
    }

    #[test]
    fn left_jacobian_inverse_and_transpose() {
        let w = Vector3::new(1.2, 0.3, -2.5);
        let jl = so3_left_jacobian(&w);
        assert!((jl * so3_left_jacobian_inv(&w) - Matrix3::identity()).norm() < 1e-12);
        assert!((so3_left_jacobian(&-w) - jl.transpose()).norm() < 1e-14);
    }

    #[test]
    fn se3_exp_cases() {
        assert_eq!(se3_exp(&Twist6::zero()), Pose3::identity());
        let v = Vector3::new(1.0, 2.0, -3.0);
        let p = se3_exp(&Twist6::new(v, Vector3::zeros()));
        assert_eq!(p.rot, Rot3::identity());
        assert_eq!(p.trans, v);
        let w = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let p = se3_exp(&Twist6::new(Vector3::x(), w));
        let oracle = left_jacobian_quadrature(&w) * Vector3::x();
        assert!((p.trans - oracle).norm() < 1e-8);
    }

    #[test]
    fn se3_log_pure_rotation() {
        let w = Vector3::new(0.0, FRAC_PI_2, 0.0);
        let xi = se3_log(&Pose3::from_rotation(so3_exp(&w)));
        assert!(xi.v.norm() < 1e-15);
        assert!((xi.w - w).norm() < 1e-15);
        assert_eq!(se3_log(&Pose3::identity()), Twist6::zero());
    }

    #[test]
    fn adjoint_blocks() {
        assert_eq!(adjoint(&Pose3::identity()), Matrix6::identity());
        let r = so3_exp(&Vector3::new(0.1, 0.2, 0.3));
        let ad = adjoint(&Pose3::from_rotation(r));
        assert_eq!(ad.fixed_view::<3, 3>(0, 0).into_owned(), *r.matrix());
        assert_eq!(ad.fixed_view::<3, 3>(3, 3).into_owned(), *r.matrix());
        assert_eq!(ad.fixed_view::<3, 3>(0, 3).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn adjoint_conjugation() {
        let t = se3_exp(&Twist6::new(
            Vector3::new(0.5, -1.0, 2.0),
            Vector3::new(0.3, 0.9, -0.4),
        ));
        let xi = Twist6::new(Vector3::new(-0.2, 0.1, 0.7), Vector3::new(0.5, -0.3, 0.2));
        let lhs = se3_exp(&Twist6::from_vector(&(adjoint(&t) * xi.to_vector())));
        let rhs = t * se3_exp(&xi) * t.inverse();
        assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).norm() < 1e-12);
    }

    #[test]
    fn curly_wedge_cases() {
        assert_eq!(curly_wedge(&Twist6::zero()), Matrix6::zeros());
        let xi = Twist6::new(Vector3::new(0.3, -0.1, 0.8), Vector3::new(-0.6, 0.2, 0.5));
        assert!((curly_wedge(&xi) * xi.to_vector()).norm() < 1e-15);
        let h = 1e-5;
        let fd = (adjoint(&se3_exp(&xi.scaled(h))) - adjoint(&se3_exp(&xi.scaled(-h)))) / (2.0 * h);
        assert!((fd - curly_wedge(&xi)).norm() < 1e-6);
    }

    #[test]
    fn dot_operator_layout() {
        let m = dot_operator(&Vector4::new(0.0, 0.0, 0.0, 1.0));
        let mut expected = Matrix4x6::zeros();
        expected
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        assert_eq!(m, expected);
        let d = dot_operator(&Vector4::new(1.0, 2.0, 3.0, 0.0));
        assert_eq!(
            d.fixed_view::<4, 3>(0, 0).into_owned(),
            SMatrix::<f64, 4, 3>::zeros()
        );
        assert_eq!(d.row(3).into_owned(), SMatrix::<f64, 1, 6>::zeros());
    }

    #[test]
    fn dilation_appends_zero() {
        assert_eq!(
            dilation(&Vector3::new(1.0, 2.0, 3.0)),
            Vector4::new(1.0, 2.0, 3.0, 0.0)
        );
        assert_eq!(dilation(&Vector3::zeros()), Vector4::zeros());
    }

    #[test]
    fn small_angle_branches_are_continuous() {
        let axis = Vector3::new(0.2, -0.7, 0.4).normalize();
        for theta in [SMALL_ANGLE - 1e-9, SMALL_ANGLE + 1e-9] {
            let k = skew(&(axis * theta));
            let assemble = |(a, b, c): (f64, f64, f64)| {
                (
                    Matrix3::identity() + k * a + k * k * b,
                    Matrix3::identity() + k * b + k * k * c,
                )
            };
            let (exp_s, jac_s) = assemble(so3_coefficients_series(theta));
            let (exp_c, jac_c) = assemble(so3_coefficients_closed(theta));
            assert!((exp_s - exp_c).norm() < 1e-12);
            assert!((jac_s - jac_c).norm() < 1e-12);

            let half = 0.5 * theta;
            let closed_inv = 1.0 / (theta * theta) - half.cos() / (2.0 * theta * half.sin());
            let series_inv = 1.0 / 12.0 + theta * theta / 720.0;
            assert!(((k * k) * (closed_inv - series_inv)).norm() < 1e-12);

            let w = axis * theta;
            assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-12);
        }
        for theta in [SE3_JAC_SERIES_ANGLE - 1e-9, SE3_JAC_SERIES_ANGLE + 1e-9] {
            let a = se3_coupling_series(theta);
            let b = se3_coupling_closed(theta);
            assert!((a.0 - b.0).abs() < 1e-12);
            assert!((a.1 - b.1).abs() < 1e-10);
            assert!((a.2 - b.2).abs() < 1e-10);
        }
    }

    #[test]
    fn se3_left_jacobian_finite_difference() {
        // Exp(xi + d) ~ Exp(J_l d) Exp(xi)
        for w in [
            Vector3::new(0.3, -0.8, 0.5),
            Vector3::new(1e-3, 2e-3, -1e-3),
            Vector3::new(0.05, 0.01, 0.02),
        ] {
            let xi = Twist6::new(Vector3::new(0.7, 0.2, -1.1), w);
            let jl = se3_left_jacobian(&xi);
            let base = se3_exp(&xi);
            let h = 1e-4;
            for c in 0..6 {
                let mut d = Vector6::zeros();
                d[c] = h;
                let plus = se3_exp(&Twist6::from_vector(&(xi.to_vector() + d)));
                let minus = se3_exp(&Twist6::from_vector(&(xi.to_vector() - d)));
                let col = (se3_log(&(plus * base.inverse())).to_vector()
                    - se3_log(&(minus * base.inverse())).to_vector())
                    / (2.0 * h);
                assert!(
                    (col - jl.column(c)).norm() < 1e-8,
                    "col {c} w {w:?}: {} vs {}",
                    col,
                    jl.column(c)
                );
            }
        }
    }

    #[test]
    fn polar_projection_restores_rotation() {
        let r = so3_exp(&Vector3::new(0.4, 0.1, -0.9));
        let noisy = r.matrix() + Matrix3::new(1e-6, 0.0, 2e-6, 0.0, -1e-6, 0.0, 3e-6, 0.0, 0.0);
        let fixed = Rot3::from_matrix_projected(&noisy);
        assert!(fixed.is_valid(1e-12));
        assert!((fixed.matrix() - r.matrix()).norm() < 1e-5);
    }
}
