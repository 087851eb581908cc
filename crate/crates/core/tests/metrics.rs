use emfuse::geom::{Rotation, Vec3};
use emfuse::metrics::{evaluate, g_mpjpe, geodesic_deg, jitter, mpjae, mpjpe, mve, Alignment, EvalSequence};
use emfuse::synth::noise::random_rotation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frames(rng: &mut ChaCha8Rng, t: usize, j: usize) -> Vec<Vec<Vec3>> {
    (0..t)
        .map(|_| (0..j).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0))).collect())
        .collect()
}

fn map(frames: &[Vec<Vec3>], f: impl Fn(&Vec3) -> Vec3) -> Vec<Vec<Vec3>> {
    frames.iter().map(|fr| fr.iter().map(&f).collect()).collect()
}

#[test]
fn mpjpe_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_frames(&mut rng, 20, 24);
    for m in [Alignment::Raw, Alignment::HipAligned, Alignment::Procrustes] {
        assert!(mpjpe(&gt, &gt, m).unwrap().mean < 1e-9);
    }
    let shifted = map(&gt, |p| p + Vec3::new(0.01, 0.0, 0.0));
    assert!(mpjpe(&shifted, &gt, Alignment::HipAligned).unwrap().mean < 1e-9);
    assert!((mpjpe(&shifted, &gt, Alignment::Raw).unwrap().mean - 10.0).abs() < 1e-9);
    let scaled = map(&gt, |p| p * 1.1);
    assert!(mpjpe(&scaled, &gt, Alignment::Procrustes).unwrap().mean < 1e-9);
    assert!(mpjpe(&scaled, &gt, Alignment::Raw).unwrap().mean > 1.0);
    assert!(mpjpe(&gt[..3], &gt, Alignment::Raw).is_err());
}

#[test]
fn mve_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_frames(&mut rng, 10, 100);
    let roots: Vec<Vec3> = gt.iter().map(|f| f[0]).collect();
    assert_eq!(mve(&gt, &gt, Alignment::Raw, None).unwrap().mean, 0.0);
    let shifted = map(&gt, |p| p + Vec3::new(0.01, 0.0, 0.0));
    let roots_s: Vec<Vec3> = roots.iter().map(|p| p + Vec3::new(0.01, 0.0, 0.0)).collect();
    assert!(mve(&shifted, &gt, Alignment::HipAligned, Some((&roots_s, &roots))).unwrap().mean < 1e-9);
    assert!(mve(&shifted, &gt, Alignment::HipAligned, None).is_err());
    let scaled = map(&gt, |p| p * 1.1);
    assert!(mve(&scaled, &gt, Alignment::Procrustes, None).unwrap().mean < 1e-9);
    assert!(mve(&scaled, &gt, Alignment::Raw, None).unwrap().mean > 1.0);
}

#[test]
fn mpjae_examples() {
    let ident = vec![vec![Rotation::identity(); 24]; 5];
    assert_eq!(mpjae(&ident, &ident, Alignment::Raw, None, None).unwrap().mean, 0.0);
    let mut one = ident.clone();
    for f in &mut one {
        f[7] = Rotation::about_z(30f64.to_radians());
    }
    assert!((mpjae(&one, &ident, Alignment::Raw, None, None).unwrap().mean - 1.25).abs() < 1e-9);
    assert!((mpjae(&one, &ident, Alignment::Raw, None, Some(&[7])).unwrap().mean - 30.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let a = random_rotation(&mut rng);
        let b = random_rotation(&mut rng);
        let d = a.to_quaternion().coords.dot(&b.to_quaternion().coords).abs().min(1.0);
        let oracle = (2.0 * d.acos()).to_degrees();
        assert!((geodesic_deg(&a, &b) - oracle).abs() < 1e-9 * 180.0, "{} vs {oracle}", geodesic_deg(&a, &b));
    }
    let bad = vec![vec![Rotation::from_matrix_unchecked(emfuse::geom::Mat3::identity() * 2.0)]];
    assert!(mpjae(&bad, &bad, Alignment::Raw, None, None).is_err());
    assert!(mpjae(&ident, &ident, Alignment::Procrustes, None, None).is_err());
}

#[test]
fn mpjae_procrustes_removes_global_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let joints = random_frames(&mut rng, 4, 24);
    let rots: Vec<Vec<Rotation>> = (0..4).map(|_| (0..24).map(|_| random_rotation(&mut rng)).collect()).collect();
    let g = Rotation::from_axis_angle(&Vec3::new(0.2, 0.5, -0.3));
    let pj = map(&joints, |p| g.rotate(p) * 0.9 + Vec3::new(1.0, 0.0, 0.0));
    let pr: Vec<Vec<Rotation>> = rots.iter().map(|f| f.iter().map(|r| g * *r).collect()).collect();
    let m = mpjae(&pr, &rots, Alignment::Procrustes, Some((&pj, &joints)), None).unwrap();
    assert!(m.mean < 1e-6);
    assert!(mpjae(&pr, &rots, Alignment::Raw, None, None).unwrap().mean > 1.0);
}

#[test]
fn jitter_examples() {
    let fps = 30.0;
    let traj = |f: &dyn Fn(f64) -> Vec3| -> Vec<Vec<Vec3>> { (0..60).map(|k| vec![f(k as f64 / fps); 3]).collect() };
    assert!(jitter(&traj(&|_| Vec3::new(1.0, 2.0, 3.0)), fps).unwrap().mean.abs() < 1e-9);
    assert!(jitter(&traj(&|t| Vec3::new(t, 0.0, 0.0)), fps).unwrap().mean < 1e-6);
    assert!(jitter(&traj(&|t| Vec3::new(0.5 * t * t, 0.0, 0.0)), fps).unwrap().mean < 1e-5);
    // Cubic: constant third derivative 6 m/s³ → 0.6 in units of 10 m/s³.
    let j = jitter(&traj(&|t| Vec3::new(t * t * t, 0.0, 0.0)), fps).unwrap();
    assert!((j.mean - 0.6).abs() < 1e-4 && j.std < 1e-4, "{j:?}");
    assert!(jitter(&traj(&|t| Vec3::new(t, 0.0, 0.0))[..3], fps).is_err());
}

#[test]
fn global_examples() {
    let fps = 30.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = random_frames(&mut rng, 1, 24).remove(0);
    let gt: Vec<Vec<Vec3>> = (0..600)
        .map(|k| base.iter().map(|p| p + Vec3::new((k as f64 * 0.02).sin(), 0.0, k as f64 * 0.01)).collect())
        .collect();
    let g = g_mpjpe(&gt, &gt, fps, 10.0, Some((&gt, &gt))).unwrap();
    assert!(g.g_mpjpe.mean < 1e-9 && g.g_mve.unwrap().mean < 1e-9);
    assert!(g.acceleration.mean < 1e-6);
    assert_eq!(g.windows, 2);
    let moved = map(&gt, |p| p + Vec3::new(1.0, 0.0, 0.0));
    assert!(g_mpjpe(&moved, &gt, fps, 10.0, None).unwrap().g_mpjpe.mean < 1e-9);
    // Linear drift of 0.1 m/s: error grows from 0 to ≈1 m within each
    // window; the oracle is the mean of 100·k/fps mm over k = 0..299.
    let drifted: Vec<Vec<Vec3>> = gt
        .iter()
        .enumerate()
        .map(|(k, f)| f.iter().map(|p| p + Vec3::new(0.1 * k as f64 / fps, 0.0, 0.0)).collect())
        .collect();
    let g = g_mpjpe(&drifted, &gt, fps, 10.0, None).unwrap();
    let oracle = (0..300).map(|k| 100.0 * k as f64 / fps).sum::<f64>() / 300.0;
    assert!((g.g_mpjpe.mean - oracle).abs() < 1e-6, "{} vs {oracle}", g.g_mpjpe.mean);
    assert!((oracle - 500.0).abs() < 5.0);
    let short = g_mpjpe(&gt[..100], &gt[..100], fps, 10.0, None).unwrap();
    assert!(short.truncated && short.windows == 1);
}

#[test]
fn frame_ordering_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = random_frames(&mut rng, 12, 10);
    let pred = map(&gt, |p| p + Vec3::new(rng.clone().random_range(0.0..0.01), 0.0, 0.0) * 0.0 + p * 0.01);
    let mut order: Vec<usize> = (0..12).collect();
    order.reverse();
    order.swap(0, 5);
    let perm = |x: &[Vec<Vec3>]| order.iter().map(|&i| x[i].clone()).collect::<Vec<_>>();
    for m in [Alignment::Raw, Alignment::Procrustes] {
        let a = mpjpe(&pred, &gt, m).unwrap().mean;
        let b = mpjpe(&perm(&pred), &perm(&gt), m).unwrap().mean;
        assert!((a - b).abs() < 1e-9);
    }
    let a = jitter(&pred, 30.0).unwrap().mean;
    let b = jitter(&perm(&pred), 30.0).unwrap().mean;
    assert!((a - b).abs() > 1e-6);
    let a = g_mpjpe(&pred, &gt, 30.0, 0.2, None).unwrap().g_mpjpe.mean;
    let b = g_mpjpe(&perm(&pred), &perm(&gt), 30.0, 0.2, None).unwrap().g_mpjpe.mean;
    assert!((a - b).abs() > 1e-6);
}

#[test]
fn report_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let joints = random_frames(&mut rng, 8, 24);
    let rotations: Vec<Vec<Rotation>> = (0..8).map(|_| (0..24).map(|_| random_rotation(&mut rng)).collect()).collect();
    let seq = EvalSequence {
        joints,
        rotations,
        vertices: None,
    };
    let r = evaluate(&seq, &seq, 30.0).unwrap();
    assert_eq!(r.mpjpe.mean, 0.0);
    assert_eq!(r.mpjae.mean, 0.0);
    let back: emfuse::metrics::MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_csv().starts_with("metric,mean,std\nmpjpe,0,0\nmpjpe_pa,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mpjpe_pa_similarity_invariant(seed in 0u64..10_000, s in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_frames(&mut rng, 3, 24);
        let pred = map(&gt, |p| p + Vec3::new(rng.clone().random_range(-0.05..0.05), 0.02, -0.01) + p * 0.05 * (p.x));
        let r = random_rotation(&mut rng);
        let t = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let moved = map(&pred, |p| r.rotate(p) * s + t);
        let a = mpjpe(&pred, &gt, Alignment::Procrustes).unwrap().mean;
        let b = mpjpe(&moved, &gt, Alignment::Procrustes).unwrap().mean;
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn mpjae_is_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<Rotation>> = (0..3).map(|_| (0..5).map(|_| random_rotation(&mut rng)).collect()).collect();
        let b: Vec<Vec<Rotation>> = (0..3).map(|_| (0..5).map(|_| random_rotation(&mut rng)).collect()).collect();
        let x = mpjae(&a, &b, Alignment::Raw, None, None).unwrap().mean;
        let y = mpjae(&b, &a, Alignment::Raw, None, None).unwrap().mean;
        prop_assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn jitter_of_cubics_is_constant(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, c2 in -1.0f64..1.0, c3 in -1.0f64..1.0) {
        let fps = 30.0;
        let f = |t: f64| c0 + c1 * t + c2 * t * t + c3 * t * t * t;
        let frames: Vec<Vec<Vec3>> = (0..40).map(|k| vec![Vec3::new(f(k as f64 / fps), 0.0, 0.0)]).collect();
        let j = jitter(&frames, fps).unwrap();
        prop_assert!((j.mean - 0.6 * c3.abs()).abs() < 1e-3 && j.std < 1e-3);
    }
}
