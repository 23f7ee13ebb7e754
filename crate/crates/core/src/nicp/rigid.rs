use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{centroid, NearestIndex, RigidTransform, Vec3};

/// Accumulated transform and the residual after each iteration's solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rmse: Vec<f64>,
}

/// Least-squares rigid motion taking `from[i]` onto `to[i]`.
pub fn kabsch(from: &[Vec3], to: &[Vec3]) -> Result<RigidTransform> {
    if from.len() != to.len() || from.is_empty() {
        return Err(Error::invalid("kabsch needs two equally sized non-empty point sets"));
    }
    let (cf, ct) = (centroid(from), centroid(to));
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += (a - cf) * (b - ct).transpose();
    }
    let svd = SVD::new(h, true, true);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= f64::MIN_POSITIVE || s[1] <= 1e-12 * s[0] {
        return Err(Error::Degenerate(format!(
            "cross-covariance has rank < 2 (singular values {:.3e}, {:.3e}, {:.3e})",
            s[0], s[1], s[2]
        )));
    }
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform { rotation, translation: ct - rotation * cf })
}

/// Point-to-point ICP from `source` onto `target`. Stops when the residual
/// improves by less than `tol` or after `max_iters` iterations.
pub fn rigid_icp(source: &[Vec3], target: &[Vec3], max_iters: usize, tol: f64) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("rigid ICP needs non-empty clouds"));
    }
    let index = NearestIndex::build(target)?;
    let mut transform = RigidTransform::identity();
    let mut rmse = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..max_iters {
        let moved = transform.apply_all(source);
        let paired: Vec<Vec3> = index.nearest_indices(&moved).into_iter().map(|i| target[i]).collect();
        let step = kabsch(&moved, &paired)?;
        transform = step.compose(&transform);
        let sq: f64 = moved.iter().zip(&paired).map(|(a, b)| (step.apply(a) - b).norm_squared()).sum();
        let r = (sq / source.len() as f64).sqrt();
        rmse.push(r);
        if r == 0.0 || prev - r < tol {
            break;
        }
        prev = r;
    }
    Ok(IcpResult { transform, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> Vec<Vec3> {
        crate::template::build_template(&crate::template::SkeletonSpec::humanoid(), 120, 0).unwrap().rest_vertices
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = cloud();
        let r = rigid_icp(&c, &c, 20, 1e-12).unwrap();
        assert!(r.rmse[0] < 1e-12);
        assert!((r.transform.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(r.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn small_motion_is_recovered() {
        let c = cloud();
        let truth = RigidTransform::from_axis_angle(Vec3::new(0.0, 0.0, 10f64.to_radians()), Vec3::new(0.1, 0.0, 0.0));
        let t = truth.apply_all(&c);
        let r = rigid_icp(&c, &t, 100, 1e-14).unwrap();
        assert!(*r.rmse.last().unwrap() < 1e-9, "{:?}", r.rmse);
        assert!((r.transform.rotation - truth.rotation).abs().max() < 1e-6);
        assert!((r.transform.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn large_rotation_stalls_in_a_local_minimum() {
        let c = cloud();
        let small = RigidTransform::from_axis_angle(Vec3::new(0.0, 0.0, 10f64.to_radians()), Vec3::new(0.1, 0.0, 0.0));
        let big = RigidTransform::from_axis_angle(Vec3::new(0.0, 0.0, 160f64.to_radians()), Vec3::zeros());
        let ok = rigid_icp(&c, &small.apply_all(&c), 100, 1e-14).unwrap();
        let bad = rigid_icp(&c, &big.apply_all(&c), 100, 1e-14).unwrap();
        let (ok, bad) = (*ok.rmse.last().unwrap(), *bad.rmse.last().unwrap());
        assert!(bad > 10.0 * ok && bad > 1e-3, "{bad} vs {ok}");
    }

    #[test]
    fn residual_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cloud();
        for _ in 0..5 {
            let axis = Vec3::new(rng.random(), rng.random(), rng.random()).normalize() * rng.random_range(0.0..1.5);
            let t = RigidTransform::from_axis_angle(axis, Vec3::new(rng.random(), 0.0, 0.0) * 0.2).apply_all(&c);
            let r = rigid_icp(&c, &t, 60, 0.0).unwrap();
            for w in r.rmse.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn collinear_source_is_degenerate() {
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(rigid_icp(&line, &cloud(), 5, 1e-9), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reflections_are_corrected() {
        let c = cloud();
        let mirrored: Vec<Vec3> = c.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let t = kabsch(&c, &mirrored).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}
