use nalgebra::{Matrix3, SVD};

use super::se3::{Sim3, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// Rotation, translation and scale.
    ProcrustesSim,
    /// Rotation and translation only.
    Rigid,
}

/// Least-squares similarity (or rigid, when `with_scale` is false) mapping
/// `src` onto `dst`, via the covariance SVD with a determinant sign fix.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Sim3> {
    umeyama_min_rank(src, dst, with_scale, 2)
}

/// As [`umeyama`], accepting covariances of rank at least `min_rank`. Below
/// rank 2 the rotation is one of several optimal choices; at rank 0 only
/// the translation is fitted.
pub fn umeyama_min_rank(src: &[Vec3], dst: &[Vec3], with_scale: bool, min_rank: usize) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::shape("umeyama", &[src.len(), 3], &[dst.len(), 3]));
    }
    let n = src.len();
    if n < 3 && min_rank >= 2 || n == 0 {
        return Err(Error::Degenerate(format!("umeyama needs at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vec3>() / nf;
    let mu_d = dst.iter().sum::<Vec3>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let svd = SVD::new(cov, true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Degenerate("covariance SVD failed".into())),
    };
    let sv = svd.singular_values;
    let scale_ref = sv[0].max(var_s).max(1e-300);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * scale_ref).count();
    if rank < min_rank {
        return Err(Error::Degenerate(format!(
            "rank-deficient covariance (rank {rank})"
        )));
    }
    if src == dst {
        return Ok(Sim3::identity());
    }
    if rank == 0 || var_s <= 0.0 {
        return Ok(Sim3 {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: mu_d - mu_s,
        });
    }
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let scale = if with_scale {
        (sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// Aligns `pred` onto `gt` and returns the transformed prediction.
pub fn align_joints(pred: &[Vec3], gt: &[Vec3], mode: AlignMode) -> Result<Vec<Vec3>> {
    if pred.iter().chain(gt).any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite("align_joints input".into()));
    }
    let sim = umeyama(pred, gt, mode == AlignMode::ProcrustesSim)?;
    Ok(pred.iter().map(|p| sim.apply(p)).collect())
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Root-mean-square distance between corresponding points.
pub fn rms_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_on_equal_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = cloud(&mut rng, 10);
        let s = umeyama(&src, &src, true).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = cloud(&mut rng, 20);
        let r0 = *UnitQuaternion::from_scaled_axis(Vec3::new(0.4, -1.2, 0.7))
            .to_rotation_matrix()
            .matrix();
        let t0 = Vec3::new(0.3, -2.0, 5.0);
        let dst: Vec<Vec3> = src.iter().map(|p| 2.5 * (r0 * p) + t0).collect();
        let s = umeyama(&src, &dst, true).unwrap();
        assert!((s.scale - 2.5).abs() < 1e-9);
        assert!((s.rotation - r0).norm() < 1e-9);
        assert!((s.translation - t0).norm() < 1e-9);
    }

    #[test]
    fn reflections_give_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = cloud(&mut rng, 12);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let s = umeyama(&src, &dst, true).unwrap();
        assert!((s.rotation.determinant() - 1.0).abs() < 1e-9);
        let r = Rotation3::from_matrix(&s.rotation);
        assert!((r.matrix() - s.rotation).norm() < 1e-9);
    }

    #[test]
    fn collinear_is_degenerate() {
        let src: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama(&src, &src, true), Err(Error::Degenerate(_))));
        assert!(matches!(umeyama(&src[..2], &src[..2], true), Err(Error::Degenerate(_))));
    }

    #[test]
    fn align_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = cloud(&mut rng, 12);
        let same = align_joints(&gt, &gt, AlignMode::Rigid).unwrap();
        assert!(mean_distance(&same, &gt) < 1e-12);

        let scaled: Vec<Vec3> = gt.iter().map(|p| 3.0 * p).collect();
        let sim = align_joints(&scaled, &gt, AlignMode::ProcrustesSim).unwrap();
        let rig = align_joints(&scaled, &gt, AlignMode::Rigid).unwrap();
        assert!(mean_distance(&sim, &gt) < 1e-9);
        assert!(mean_distance(&rig, &gt) > 1e-3);

        let shifted: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(1.0, -2.0, 0.5)).collect();
        let rig = align_joints(&shifted, &gt, AlignMode::Rigid).unwrap();
        assert!(mean_distance(&rig, &gt) < 1e-9);
    }
}
