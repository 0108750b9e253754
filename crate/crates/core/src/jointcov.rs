//! Joint distribution of the poses predicted within one scan interval.
//!
//! Each history entry keeps its marginal error-state covariance and the
//! cross-covariance `Cov(dx_entry, dx_latest)` with the newest entry. When
//! the newest state advances by `dx' = F dx + w'`, every stored cross block
//! becomes `C F^T`, so the full stacked covariance never has to be formed.

use nalgebra::{DMatrix, Matrix6};

use crate::error::{Error, Result};
use crate::liegroup::{adjoint, Cov6, Pose3};
use crate::propagation::PropagationStep;
use crate::state::Matrix15;

/// Upper bound on entries for the dense joint covariance.
pub const MAX_STACKED_ENTRIES: usize = 200;

/// Negative eigenvalues smaller than this (relative to the spectral radius)
/// are treated as roundoff and not reported as a repair.
const ROUNDOFF_EIGEN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub t: f64,
    pub pose: Pose3,
    pub p_marginal: Matrix15,
    /// `Cov(dx_this, dx_latest)`.
    pub c_to_latest: Matrix15,
    /// Transition that produced this entry from the previous one.
    pub f_in: Matrix15,
    /// Noise covariance `F_w Q F_w^T` injected by that transition.
    pub q_in: Matrix15,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseHistory {
    entries: Vec<HistoryEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelCovResult {
    /// `T_latest^-1 * T_j`.
    pub rel_pose: Pose3,
    pub cov: Cov6,
    pub used_cross_terms: bool,
    /// A non-roundoff negative eigenvalue was clipped.
    pub psd_repaired: bool,
}

impl PoseHistory {
    pub fn new(t: f64, pose: Pose3, p: Matrix15) -> Self {
        PoseHistory {
            entries: vec![HistoryEntry {
                t,
                pose,
                p_marginal: p,
                c_to_latest: p,
                f_in: Matrix15::identity(),
                q_in: Matrix15::zeros(),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn latest(&self) -> &HistoryEntry {
        self.entries.last().expect("history is never empty")
    }

    pub fn start_time(&self) -> f64 {
        self.entries[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.latest().t
    }

    /// Appends the result of one propagation step.
    pub fn advance(&mut self, step: &PropagationStep) -> Result<()> {
        let last_t = self.end_time();
        if !(step.t > last_t) {
            return Err(Error::NonMonotoneTime {
                index: self.entries.len(),
                prev: last_t,
                t: step.t,
            });
        }
        let f_t = step.f_x.transpose();
        for e in &mut self.entries {
            e.c_to_latest *= f_t;
        }
        let q_in = step.f_w * step.q * step.f_w.transpose();
        self.entries.push(HistoryEntry {
            t: step.t,
            pose: step.state_after.pose,
            p_marginal: step.cov_after,
            c_to_latest: step.cov_after,
            f_in: step.f_x,
            q_in,
        });
        Ok(())
    }

    /// Functional form of [`advance`](Self::advance).
    pub fn advanced(mut self, step: &PropagationStep) -> Result<Self> {
        self.advance(step)?;
        Ok(self)
    }

    pub fn extend(&mut self, steps: &[PropagationStep]) -> Result<()> {
        steps.iter().try_for_each(|s| self.advance(s))
    }

    /// Covariance of the relative transform from the latest pose to entry `j`.
    pub fn relative_cov(&self, j: usize, with_cross: bool) -> Result<RelCovResult> {
        let entry = self.entries.get(j).ok_or(Error::IndexOutOfRange {
            index: j,
            len: self.entries.len(),
        })?;
        let latest = self.latest();
        let rel_pose = latest.pose.inverse() * entry.pose;
        let a = adjoint(&rel_pose.inverse());

        let sigma_j = pose_block(&entry.p_marginal);
        let sigma_k = pose_block(&latest.p_marginal);
        let mut cov = a * sigma_k * a.transpose() + sigma_j;
        if with_cross {
            let sigma_jk = pose_block(&entry.c_to_latest);
            cov -= a * sigma_jk.transpose() + sigma_jk * a.transpose();
        }
        let (cov, psd_repaired) = repair_psd(&cov);
        Ok(RelCovResult {
            rel_pose,
            cov: Cov6::from_matrix(cov),
            used_cross_terms: with_cross,
            psd_repaired,
        })
    }

    /// Dense covariance of the stacked error states of all entries.
    pub fn stack_joint_covariance(&self) -> Result<DMatrix<f64>> {
        let n = self.entries.len();
        if n > MAX_STACKED_ENTRIES {
            return Err(Error::SizeGuard {
                entries: n,
                max: MAX_STACKED_ENTRIES,
            });
        }
        let dim = 15 * n;
        // stacked = L * [dx_0; w'_1; ...; w'_{n-1}]
        let mut l = DMatrix::<f64>::zeros(dim, dim);
        for b in 0..n {
            let mut phi = Matrix15::identity();
            l.view_mut((15 * b, 15 * b), (15, 15)).copy_from(&phi);
            for a in (b + 1)..n {
                phi = self.entries[a].f_in * phi;
                l.view_mut((15 * a, 15 * b), (15, 15)).copy_from(&phi);
            }
        }
        let mut source = DMatrix::<f64>::zeros(dim, dim);
        source
            .view_mut((0, 0), (15, 15))
            .copy_from(&self.entries[0].p_marginal);
        for b in 1..n {
            source
                .view_mut((15 * b, 15 * b), (15, 15))
                .copy_from(&self.entries[b].q_in);
        }
        Ok(&l * source * l.transpose())
    }
}

pub fn pose_block(m: &Matrix15) -> Matrix6<f64> {
    m.fixed_view::<6, 6>(0, 0).into_owned()
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn repair_psd(m: &Matrix6<f64>) -> (Matrix6<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, false);
    }
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let significant = min < -ROUNDOFF_EIGEN * scale;
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = eig.eigenvectors * Matrix6::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    ((out + out.transpose()) * 0.5, significant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{se3_exp, Twist6};
    use crate::propagation::{propagate_batch, PropagationModel};
    use crate::state::{ImuNoiseParams, ImuSample, Matrix12, Matrix15x12, NavState};
    use nalgebra::Vector3;

    fn noise() -> ImuNoiseParams {
        ImuNoiseParams {
            sigma_gyro: 0.02,
            sigma_acc: 0.2,
            sigma_bg_walk: 1e-3,
            sigma_ba_walk: 1e-2,
            ..Default::default()
        }
    }

    fn history(n_steps: usize, seed: f64) -> PoseHistory {
        let imu: Vec<ImuSample> = (1..=n_steps)
            .map(|i| {
                let t = i as f64 * 0.01;
                ImuSample::new(
                    t,
                    Vector3::new(
                        1.5 * (3.0 * t + seed).sin(),
                        1.2 * (2.0 * t).cos(),
                        0.8 + seed,
                    ),
                    Vector3::new((t + seed).sin(), 0.5, 9.81),
                )
            })
            .collect();
        let x0 = NavState::new(Pose3::identity(), Vector3::new(1.0, 0.5, -0.2));
        let p0 = Matrix15::from_diagonal_element(1e-4);
        let steps = propagate_batch(&x0, &p0, 0.0, &imu, &noise(), PropagationModel::Se3).unwrap();
        let mut h = PoseHistory::new(0.0, x0.pose, p0);
        h.extend(&steps).unwrap();
        h
    }

    fn identity_step(t: f64, pose: Pose3, cov: Matrix15) -> PropagationStep {
        PropagationStep {
            t,
            dt: 0.01,
            state_after: NavState::new(pose, Vector3::zeros()),
            f_x: Matrix15::identity(),
            f_w: Matrix15x12::zeros(),
            q: Matrix12::zeros(),
            cov_after: cov,
        }
    }

    #[test]
    fn identity_transition_gives_perfect_correlation() {
        let p = Matrix15::from_diagonal_element(0.2);
        let mut h = PoseHistory::new(0.0, Pose3::identity(), p);
        h.advance(&identity_step(0.01, Pose3::identity(), p))
            .unwrap();
        assert_eq!(h.entries()[0].c_to_latest, p);
        assert_eq!(h.latest().c_to_latest, h.latest().p_marginal);
    }

    #[test]
    fn advance_rejects_stale_step() {
        let p = Matrix15::identity();
        let mut h = PoseHistory::new(1.0, Pose3::identity(), p);
        assert!(h
            .advance(&identity_step(1.0, Pose3::identity(), p))
            .is_err());
    }

    #[test]
    fn incremental_cross_blocks_match_dense_stacking() {
        let h = history(5, 0.3);
        let dense = h.stack_joint_covariance().unwrap();
        let k = h.len() - 1;
        for (j, e) in h.entries().iter().enumerate() {
            let block = dense.view((15 * j, 15 * k), (15, 15));
            let marginal = dense.view((15 * j, 15 * j), (15, 15));
            assert!((block - e.c_to_latest).norm() < 1e-12 * (1.0 + e.c_to_latest.norm()));
            assert!((marginal - e.p_marginal).norm() < 1e-12 * (1.0 + e.p_marginal.norm()));
        }
    }

    #[test]
    fn dense_stacking_small_cases() {
        let p = Matrix15::from_diagonal_element(0.5);
        let h = PoseHistory::new(0.0, Pose3::identity(), p);
        assert_eq!(
            h.stack_joint_covariance().unwrap(),
            DMatrix::from_column_slice(15, 15, p.as_slice())
        );

        let mut h2 = h.clone();
        let f = Matrix15::from_fn(|r, c| {
            if r == c {
                1.0
            } else {
                0.01 * ((r + 2 * c) as f64).sin()
            }
        });
        let mut step = identity_step(0.01, Pose3::identity(), f * p * f.transpose());
        step.f_x = f;
        h2.advance(&step).unwrap();
        let dense = h2.stack_joint_covariance().unwrap();
        let sv = dense.singular_values();
        let rank = sv.iter().filter(|s| **s > 1e-9 * sv.max()).count();
        assert!(rank <= 15);
    }

    #[test]
    fn size_guard() {
        let p = Matrix15::identity();
        let mut h = PoseHistory::new(0.0, Pose3::identity(), p);
        for i in 1..=MAX_STACKED_ENTRIES {
            h.advance(&identity_step(i as f64, Pose3::identity(), p))
                .unwrap();
        }
        assert!(matches!(
            h.stack_joint_covariance(),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn self_relative_covariance_vanishes() {
        let h = history(30, 0.1);
        let r = h.relative_cov(h.len() - 1, true).unwrap();
        assert!(r.cov.matrix().norm() < 1e-12);
        assert!((r.rel_pose.to_homogeneous() - Pose3::identity().to_homogeneous()).norm() < 1e-14);
        assert!(!r.psd_repaired);
    }

    #[test]
    fn zero_cross_block_reduces_to_independent_form() {
        let mut h = history(10, 0.5);
        h.entries[3].c_to_latest = Matrix15::zeros();
        let a = h.relative_cov(3, true).unwrap();
        let b = h.relative_cov(3, false).unwrap();
        assert!((a.cov.matrix() - b.cov.matrix()).norm() < 1e-18);
        assert!(a.used_cross_terms && !b.used_cross_terms);
    }

    #[test]
    fn relative_cov_index_checked() {
        let h = history(3, 0.0);
        assert!(matches!(
            h.relative_cov(4, true),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn cross_terms_shrink_relative_uncertainty() {
        let h = history(40, 0.2);
        let mut prev = f64::INFINITY;
        for j in 0..h.len() {
            let with = h.relative_cov(j, true).unwrap();
            let without = h.relative_cov(j, false).unwrap();
            assert!(with.cov.trace() < without.cov.trace());
            assert!(!with.psd_repaired);
            assert!(with.cov.trace() <= prev * (1.0 + 1e-12));
            prev = with.cov.trace();
        }
    }

    #[test]
    fn psd_repair_is_small_and_flagged() {
        let v = se3_exp(&Twist6::new(
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.3, -0.2, 0.1),
        ));
        let ad = adjoint(&v);
        let mut m = ad * ad.transpose() * 1e-3;
        let eig = m.symmetric_eigen();
        // push the smallest eigenvalue slightly negative
        let i = eig.eigenvalues.imin();
        let u = eig.eigenvectors.column(i).into_owned();
        m -= u * u.transpose() * (eig.eigenvalues[i] + 1e-9);
        let (fixed, repaired) = repair_psd(&m);
        assert!(repaired);
        assert!(fixed.symmetric_eigenvalues().min() > -1e-15);
        assert!((fixed - m).norm() < 1e-8);
    }
}
