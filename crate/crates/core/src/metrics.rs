//! Trajectory error metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::liegroup::{Pose3, Rot3};

/// Rigid transform `T` (no scale) minimizing `sum |T src_i - dst_i|^2`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose3> {
    if src.len() != dst.len() {
        return Err(Error::InvalidParameter(format!(
            "alignment needs equal lengths, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let cross = src.iter().zip(dst).fold(Matrix3::zeros(), |acc, (s, d)| {
        acc + (d - mu_d) * (s - mu_s).transpose()
    });
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = Rot3::from_matrix_unchecked(u * d * v_t);
    let trans = mu_d - rot.matrix() * mu_s;
    Ok(Pose3::new(rot, trans))
}

/// Absolute trajectory error: position RMSE after rigid alignment of
/// `estimate` onto `truth`.
pub fn ate_rmse(estimate: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    let t = align_rigid(estimate, truth)?;
    let sq: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, g)| (t.transform_point(e) - g).norm_squared())
        .sum();
    Ok((sq / estimate.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::so3_exp;

    fn cloud() -> Vec<Vector3<f64>> {
        (0..12)
            .map(|i| {
                Vector3::new(
                    (i as f64).sin() * 3.0,
                    (i as f64 * 0.7).cos(),
                    0.1 * i as f64,
                )
            })
            .collect()
    }

    #[test]
    fn rigid_copy_has_zero_error() {
        let truth = cloud();
        let t = Pose3::new(
            so3_exp(&Vector3::new(0.3, -1.0, 2.0)),
            Vector3::new(5.0, -2.0, 1.0),
        );
        let est: Vec<_> = truth.iter().map(|p| t.transform_point(p)).collect();
        assert!(ate_rmse(&est, &truth).unwrap() < 1e-12);
        let back = align_rigid(&est, &truth).unwrap();
        assert!((back * t).log().norm() < 1e-12);
    }

    #[test]
    fn constant_offset_along_one_point_is_not_hidden() {
        let truth = cloud();
        let mut est = truth.clone();
        est[3].z += 1.0;
        let ate = ate_rmse(&est, &truth).unwrap();
        assert!(ate > 0.1 && ate < 1.0 / (12f64).sqrt() + 1e-12);
    }

    #[test]
    fn mismatched_inputs_error() {
        assert!(ate_rmse(&cloud()[..3], &cloud()).is_err());
        assert!(ate_rmse(&[], &[]).is_err());
    }
}
