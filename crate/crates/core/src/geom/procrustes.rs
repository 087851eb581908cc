//! Least-squares similarity alignment of corresponding point sets.

use super::rotation::{Mat3, Rotation, Vec3};
use super::transform::SimilarityTransform;
use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;

/// Umeyama's closed form: the transform minimizing `Σ‖s·R·xᵢ + t − yᵢ‖²`
/// (with `s = 1` when `with_scale` is false).
pub fn procrustes_align(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "procrustes correspondences",
            expected: source.len(),
            got: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::invalid(format!("procrustes needs at least 3 points, got {n}")));
    }
    if source.iter().chain(target).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("procrustes points".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mx = source.iter().sum::<Vec3>() * inv_n;
    let my = target.iter().sum::<Vec3>() * inv_n;

    let mut cov = Mat3::zeros();
    let mut sxx = Mat3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x - mx;
        let dy = y - my;
        cov += dy * dx.transpose();
        sxx += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv_n;
    var_x *= inv_n;

    let spread = sxx.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= RANK_TOL * ev[0] {
        return Err(Error::Degenerate("procrustes source points are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        d.z = -1.0;
    }
    let r = u * Mat3::from_diagonal(&d) * vt;
    let scale = if with_scale {
        let trace: f64 = svd.singular_values.component_mul(&d).sum();
        trace / var_x
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::Degenerate("procrustes produced a non-positive scale".into()));
    }
    let rotation = Rotation::project(&r);
    let translation = my - rotation.rotate(&mx) * scale;
    SimilarityTransform::new(scale, rotation, translation)
}

/// Objective value `Σ‖T(xᵢ) − yᵢ‖²`.
pub fn alignment_residual(t: &SimilarityTransform, source: &[Vec3], target: &[Vec3]) -> f64 {
    source.iter().zip(target).map(|(x, y)| (t.apply(x) - y).norm_squared()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_on_equal_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 10);
        let t = procrustes_align(&x, &x, true).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        assert!(t.rotation.angle() < 1e-9);
        assert!(alignment_residual(&t, &x, &x) < 1e-20);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(&mut rng, 12);
        let r = Rotation::about_z(std::f64::consts::FRAC_PI_2);
        let tr = Vec3::new(1.0, 0.0, 0.0);
        let y: Vec<Vec3> = x.iter().map(|p| r.rotate(p) * 2.0 + tr).collect();
        let t = procrustes_align(&x, &y, true).unwrap();
        assert!((t.scale() - 2.0).abs() < 1e-9);
        assert!(t.rotation.angle_to(&r) < 1e-9);
        assert!((t.translation - tr).norm() < 1e-9);
    }

    #[test]
    fn rejects_small_and_degenerate_sets() {
        let p = vec![Vec3::zeros(), Vec3::x()];
        assert!(procrustes_align(&p, &p, true).is_err());
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        assert!(procrustes_align(&line, &line, true).is_err());
        let same = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        assert!(procrustes_align(&same, &same, false).is_err());
    }

    #[test]
    fn beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = cloud(&mut rng, 20);
        let truth = Rotation::from_axis_angle(&Vec3::new(0.3, -0.8, 0.4));
        let y: Vec<Vec3> = x
            .iter()
            .map(|p| {
                let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                truth.rotate(p) * 1.3 + Vec3::new(0.2, 0.1, -0.5) + Vec3::from(n) * 0.05
            })
            .collect();
        let best = alignment_residual(&procrustes_align(&x, &y, true).unwrap(), &x, &y);
        for _ in 0..1000 {
            let aa = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let cand = SimilarityTransform::new(
                rng.random_range(0.5..2.0),
                Rotation::from_axis_angle(&aa),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            )
            .unwrap();
            assert!(best <= alignment_residual(&cand, &x, &y));
        }
    }

    proptest! {
        #[test]
        fn residual_invariant_under_source_similarity(seed in 0u64..1000, s in 0.3f64..3.0,
                                                       ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = cloud(&mut rng, 15);
            let y = cloud(&mut rng, 15);
            let g = SimilarityTransform::new(s, Rotation::from_axis_angle(&Vec3::new(ax, ay, az)), Vec3::new(0.5, -1.0, 2.0)).unwrap();
            let gx = g.apply_all(&x);
            let r0 = alignment_residual(&procrustes_align(&x, &y, true).unwrap(), &x, &y);
            let r1 = alignment_residual(&procrustes_align(&gx, &y, true).unwrap(), &gx, &y);
            prop_assert!((r0 - r1).abs() < 1e-9);
        }
    }
}
