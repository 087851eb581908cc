use emfuse::body::{build_toy_humanoid, toy, SensorAnchor};
use emfuse::calib::{
    align_camera_trajectory, align_root_trajectory, loop_closure_drift, skin_measurements, solve_skin_offsets,
    solve_source_offsets, sync_by_clap, SourceTracks,
};
use emfuse::geom::{RigidTransform, Rotation, Vec3};
use emfuse::synth::em::offset_pose;
use emfuse::synth::noise::{random_rotation, rotation_noise};
use emfuse::synth::scenario::{random_track, simulate_skin_calibration, simulate_source_calibration};
use emfuse::synth::{generate_motion, MotionStyle, NoiseSpec};
use emfuse::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_offset(rng: &mut ChaCha8Rng) -> RigidTransform {
    RigidTransform::new(
        random_rotation(rng),
        Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
    )
}

fn offset_error(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    ((a.translation - b.translation).norm(), a.rotation.angle_to(&b.rotation))
}

fn planted(seed: u64, sensors: usize) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..=sensors).map(|_| random_offset(&mut rng)).collect()
}

#[test]
fn source_offsets_exact_on_noiseless_data() {
    for seed in 0..20 {
        let truth = planted(seed, 5);
        let tracks = simulate_source_calibration(&truth, 450, 30, &NoiseSpec::zero(), seed).unwrap();
        let cal = solve_source_offsets(&tracks).unwrap();
        for (est, t) in cal.offsets.iter().zip(&truth) {
            let (dp, da) = offset_error(est, t);
            assert!(dp < 1e-6 && da < 1e-5, "seed {seed}: {dp:e} m, {da:e} rad");
        }
        assert!(cal.residual < 1e-10);
    }
}

#[test]
fn source_offsets_identity_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let track = random_track(&mut rng, 60, 30, &Vec3::zeros(), 0.3, 1.0);
    let local = random_track(&mut rng, 60, 30, &Vec3::zeros(), 0.3, 1.0);
    let local2 = random_track(&mut rng, 60, 30, &Vec3::zeros(), 0.3, 1.0);
    let tags = |l: &[RigidTransform]| track.iter().zip(l).map(|(a, b)| a.compose(b)).collect::<Vec<_>>();
    let tracks = SourceTracks {
        em_local: vec![local.clone(), local2.clone()],
        tags: vec![track.clone(), tags(&local), tags(&local2)],
    };
    let cal = solve_source_offsets(&tracks).unwrap();
    assert!(cal.residual < 1e-20);
    for o in &cal.offsets {
        let (dp, da) = offset_error(o, &RigidTransform::identity());
        assert!(dp < 1e-9 && da < 1e-9);
    }
}

#[test]
fn source_offsets_under_paper_noise() {
    let noise = NoiseSpec::default();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let truth = planted(100 + seed, 5);
        let tracks = simulate_source_calibration(&truth, 450, 30, &noise, seed).unwrap();
        let cal = solve_source_offsets(&tracks).unwrap();
        for (est, t) in cal.offsets.iter().zip(&truth) {
            let (dp, da) = offset_error(est, t);
            worst = (worst.0.max(dp), worst.1.max(da.to_degrees()));
        }
    }
    println!("worst offset error under noise: {:.2} mm, {:.3} deg", worst.0 * 1e3, worst.1);
    assert!(worst.0 < 5e-3 && worst.1 < 1.0);
}

#[test]
fn source_offsets_invariant_to_world_frame() {
    let truth = planted(7, 3);
    let tracks = simulate_source_calibration(&truth, 120, 30, &NoiseSpec::zero(), 7).unwrap();
    let g = RigidTransform::new(Rotation::from_axis_angle(&Vec3::new(0.4, -1.0, 2.0)), Vec3::new(3.0, 1.0, -2.0));
    let moved = SourceTracks {
        em_local: tracks.em_local.clone(),
        tags: tracks.tags.iter().map(|t| t.iter().map(|p| g.compose(p)).collect()).collect(),
    };
    let a = solve_source_offsets(&tracks).unwrap();
    let b = solve_source_offsets(&moved).unwrap();
    for (x, y) in a.offsets.iter().zip(&b.offsets) {
        let (dp, da) = offset_error(x, y);
        assert!(dp < 1e-6 && da < 1e-6);
    }
}

#[test]
fn source_offsets_reject_small_or_static_input() {
    let truth = planted(3, 1);
    let tracks = simulate_source_calibration(&truth, 60, 30, &NoiseSpec::zero(), 3).unwrap();
    assert!(matches!(solve_source_offsets(&tracks), Err(Error::UnderConstrained(_))));
    // Nothing moves: offsets are not separable from each other.
    let truth = planted(4, 2);
    let mut tracks = simulate_source_calibration(&truth, 60, 30, &NoiseSpec::zero(), 4).unwrap();
    for s in tracks.em_local.iter_mut().chain(tracks.tags.iter_mut()) {
        let first = s[0];
        s.iter_mut().for_each(|p| *p = first);
    }
    assert!(matches!(solve_source_offsets(&tracks), Err(Error::UnderConstrained(_))));
}

fn skin_setup(frames: f64, noise: &NoiseSpec, seed: u64) -> (Vec<SensorAnchor>, Vec<SensorAnchor>, RigidTransform, Vec<emfuse::geom::TriangleMesh>, Vec<Vec<RigidTransform>>) {
    let model = build_toy_humanoid(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<SensorAnchor> = toy::sensor_anchors(&model).unwrap();
    let truth: Vec<SensorAnchor> = base
        .iter()
        .map(|a| {
            let v = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(0.0..0.02));
            a.clone().with_offset(rotation_noise(&mut rng, 0.4), v)
        })
        .collect();
    let source = toy::source_anchor(&model).unwrap();
    let so = random_offset(&mut rng);
    let poses = generate_motion(&model, frames, 30, MotionStyle::RangeOfMotion, seed).unwrap();
    let data = simulate_skin_calibration(&model, &poses, &truth, &source, &so, noise, seed).unwrap();
    let ids: Vec<usize> = base.iter().map(|a| a.sensor_id).collect();
    let meas = skin_measurements(&data.em, &ids, &data.source_tag, &so).unwrap();
    let meshes = poses.iter().map(|p| model.skin_mesh(p).unwrap()).collect();
    (base, truth, so, meshes, meas)
}

#[test]
fn skin_offsets_exact_on_noiseless_data() {
    for seed in 0..20 {
        let (base, truth, _, meshes, meas) = skin_setup(3.0, &NoiseSpec::zero(), seed);
        let est = solve_skin_offsets(&meshes, &base, &meas[..base.len()]).unwrap();
        for (e, t) in est.iter().zip(&truth) {
            assert_eq!(e.sensor_id, t.sensor_id);
            assert!((e.v - t.offset_translation).norm() < 1e-8);
            assert!(e.q.angle_to(&t.offset_rotation) < 1e-8);
        }
    }
}

#[test]
fn skin_offsets_single_frame_matches_algebraic_solve() {
    let (base, truth, _, meshes, meas) = skin_setup(1.0 / 30.0, &NoiseSpec::zero(), 5);
    assert_eq!(meshes.len(), 1);
    let est = solve_skin_offsets(&meshes, &base, &meas[..base.len()]).unwrap();
    for ((e, a), m) in est.iter().zip(&base).zip(&meas) {
        let f = emfuse::body::anchor_frame(&meshes[0].vertices, &meshes[0].faces, a).unwrap();
        let q = f.rotation.transpose() * m[0].rotation;
        let v = f.rotation.transpose().rotate(&(m[0].translation - f.position));
        assert!((e.v - v).norm() < 1e-12 && e.q.angle_to(&q) < 1e-9);
    }
    let _ = truth;
}

#[test]
fn skin_offsets_identity_and_noise() {
    let model = build_toy_humanoid(0).unwrap();
    let base = toy::sensor_anchors(&model).unwrap();
    let poses = generate_motion(&model, 1.0, 30, MotionStyle::RangeOfMotion, 2).unwrap();
    let meshes: Vec<_> = poses.iter().map(|p| model.skin_mesh(p).unwrap()).collect();
    let meas: Vec<Vec<RigidTransform>> = base
        .iter()
        .map(|a| {
            meshes
                .iter()
                .map(|m| {
                    let (p, r) = emfuse::body::virtual_sensor(m, a).unwrap();
                    RigidTransform::new(r, p)
                })
                .collect()
        })
        .collect();
    for o in solve_skin_offsets(&meshes, &base, &meas).unwrap() {
        assert!(o.v.norm() < 1e-12 && o.q.angle() < 1e-9 && o.residual < 1e-20);
    }
    let (base, truth, _, meshes, meas) = skin_setup(3.0, &NoiseSpec::default(), 9);
    let est = solve_skin_offsets(&meshes, &base, &meas[..base.len()]).unwrap();
    for (e, t) in est.iter().zip(&truth) {
        assert!((e.v - t.offset_translation).norm() < 5e-3);
        assert!(e.q.angle_to(&t.offset_rotation).to_degrees() < 1.0);
    }
}

fn device_and_tag(seed: u64, n: usize, pos_sigma: f64, rot_sigma_deg: f64) -> (Vec<RigidTransform>, Vec<RigidTransform>, RigidTransform, RigidTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let device = random_track(&mut rng, n, 30, &Vec3::new(0.0, 1.2, 0.0), 1.0, 0.8);
    let t = RigidTransform::new(random_rotation(&mut rng), Vec3::new(1.0, -2.0, 0.5));
    let off = random_offset(&mut rng);
    let noise = NoiseSpec {
        tag_pos_sigma: pos_sigma,
        tag_rot_sigma: rot_sigma_deg,
        ..NoiseSpec::zero()
    };
    let world: Vec<RigidTransform> = device.iter().map(|d| t.compose(d)).collect();
    let tags = emfuse::synth::simulate_tag_track(&world, &off, &noise, seed).unwrap();
    (device, tags, t, off)
}

#[test]
fn camera_alignment_exact_on_constructed_tracks() {
    let (device, tags, t, off) = device_and_tag(3, 200, 0.0, 0.0);
    let a = align_camera_trajectory(&device, &tags).unwrap();
    assert!(a.position_residuals.iter().all(|r| *r < 1e-9));
    assert!(a.angle_residuals.iter().all(|r| *r < 1e-7));
    assert!(offset_error(&a.world_transform, &t).0 < 1e-8);
    assert!(offset_error(&a.tag_offset, &off).0 < 1e-8);
    assert_eq!(a.position_residuals.len(), device.len());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dev = random_track(&mut rng, 50, 30, &Vec3::zeros(), 0.5, 0.5);
    let id = align_camera_trajectory(&dev, &dev).unwrap();
    assert!(offset_error(&id.world_transform, &RigidTransform::identity()).0 < 1e-9);
    assert!(id.world_transform.rotation.angle() < 1e-8);
}

#[test]
fn camera_alignment_reproduces_injected_noise() {
    // 3D RMS σ: the mean residual norm of a Maxwell distribution is
    // σ·sqrt(8/(3π)). Angles are |N(0, σ)|, with mean σ·sqrt(2/π).
    let (sp, sr) = (0.018, 0.4);
    let (device, tags, t, off) = device_and_tag(4, 450, sp, sr);
    let a = align_camera_trajectory(&device, &tags).unwrap();
    let (pm, _) = a.position_stats();
    let (am, _) = a.angle_stats();
    let k = (8.0 / (3.0 * std::f64::consts::PI)).sqrt();
    assert!((pm / (sp * k) - 1.0).abs() < 0.2, "position mean {pm}");
    let ka = (2.0 / std::f64::consts::PI).sqrt();
    assert!((am / (sr * ka) - 1.0).abs() < 0.2, "angle mean {am}");
    // Optimality: never worse than the generating parameters.
    let gt_obj: f64 = device
        .iter()
        .zip(&tags)
        .map(|(d, q)| {
            let p = offset_pose(&t.compose(d), &off);
            (p.translation - q.translation).norm_squared() + p.rotation.frobenius_sq(&q.rotation)
        })
        .sum();
    assert!(a.objective <= gt_obj * (1.0 + 1e-9));
}

#[test]
fn camera_alignment_detects_pure_translation() {
    let device: Vec<RigidTransform> = (0..30)
        .map(|k| RigidTransform::new(Rotation::about_y(0.3), Vec3::new(0.1 * k as f64, 0.0, 0.0)))
        .collect();
    assert!(matches!(align_camera_trajectory(&device, &device), Err(Error::UnderConstrained(_))));
    assert!(align_camera_trajectory(&device[..5], &device[..5]).is_err());
}

#[test]
fn root_alignment() {
    let (device, tags, t, _) = device_and_tag(5, 120, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let root_d: Vec<Vec3> = (0..120)
        .map(|k| Vec3::new((k as f64 * 0.05).sin(), 0.9, (k as f64 * 0.05).cos()) + Vec3::new(rng.random(), 0.0, 0.0) * 0.01)
        .collect();
    let root_w: Vec<Vec3> = root_d.iter().map(|r| t.apply(r)).collect();
    let (_, d) = align_root_trajectory(&root_d, &root_w, &device, &tags).unwrap();
    assert!(d.iter().all(|v| *v < 1e-9));
    // A constant offset expressed in the body's rotating frame cannot be
    // absorbed by one rigid transform.
    let shifted: Vec<Vec3> = root_w
        .iter()
        .enumerate()
        .map(|(k, r)| r + Rotation::about_y(k as f64 * 0.05).rotate(&Vec3::new(0.05, 0.0, 0.0)))
        .collect();
    let (_, d) = align_root_trajectory(&root_d, &shifted, &device, &tags).unwrap();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 0.05).abs() < 0.01, "mean {mean}");
}

#[test]
fn drift_examples() {
    let square = [
        Vec3::zeros(),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(1.0, 0.0, 1.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::zeros(),
    ];
    let d = loop_closure_drift(&square).unwrap();
    assert_eq!((d.drift, d.path_length, d.fraction), (0.0, 4.0, 0.0));
    let line: Vec<Vec3> = (0..=20).map(|k| Vec3::new(0.1 * k as f64, 0.0, 0.0)).collect();
    let d = loop_closure_drift(&line).unwrap();
    assert!((d.drift - 2.0).abs() < 1e-12 && (d.path_length - 2.0).abs() < 1e-12 && (d.fraction - 1.0).abs() < 1e-12);
    assert!(loop_closure_drift(&line[..1]).is_err());
}

#[test]
fn clap_sync_recovers_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base: Vec<f64> = (0..400).map(|_| rng.random::<f64>() * 0.2).collect();
    for shift in [-17i64, 0, 5, 42] {
        let mut em = base.clone();
        let mut audio = base.clone();
        let clap = 200;
        audio[clap] += 5.0;
        em[(clap as i64 + shift) as usize] += 5.0;
        assert_eq!(sync_by_clap(&em, &audio, 60).unwrap(), shift);
    }
    assert!(sync_by_clap(&[1.0; 10], &[1.0; 10], 3).is_err());
}
