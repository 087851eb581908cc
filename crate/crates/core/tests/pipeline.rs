use std::sync::OnceLock;

use emfuse::body::{BodyModel, PoseParams, ShapedBody};
use emfuse::geom::{RigidTransform, Rotation, Vec3};
use emfuse::metrics::{jitter, mpjpe, Alignment};
use emfuse::optim::{check_gradient, FnObjective};
use emfuse::pipeline::{
    e_2d, e_pcl, e_prior, e_rec, run_emp, savgol_filter, stage1, stage2, stage3, EmpConfig, SequenceInput, Stage,
    Stage1Config, Stage2Config, Stage3Config, TermValue,
};
use emfuse::synth::{simulate_capture, Keypoint2D, NoiseSpec, ScenarioConfig, SyntheticCapture};
use emfuse::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn capture(noise: NoiseSpec, duration: f64, seed: u64) -> SyntheticCapture {
    simulate_capture(&ScenarioConfig {
        duration,
        noise,
        seed,
        ..ScenarioConfig::default()
    })
    .unwrap()
}

fn clean() -> &'static SyntheticCapture {
    static CAP: OnceLock<SyntheticCapture> = OnceLock::new();
    CAP.get_or_init(|| capture(NoiseSpec::zero(), 1.5, 3))
}

fn input(cap: &SyntheticCapture) -> SequenceInput<'_> {
    SequenceInput {
        beta: &cap.beta,
        em: &cap.em,
        frames: &cap.frames,
        anchors: &cap.anchors,
        source_anchor: &cap.source_anchor,
    }
}

fn joints(model: &BodyModel, poses: &[PoseParams]) -> Vec<Vec<Vec3>> {
    poses.iter().map(|p| model.forward_kinematics(p).unwrap().0).collect()
}

fn root_rest(cap: &SyntheticCapture) -> Vec3 {
    ShapedBody::new(&cap.model, &cap.beta).unwrap().joints[0]
}

/// Ground truth re-expressed in the camera's world.
fn gt_device(cap: &SyntheticCapture, t: usize) -> PoseParams {
    cap.gt_poses[t].transformed(&cap.world_to_device, &root_rest(cap))
}

fn perturbed(pose: &PoseParams, seed: u64, scale: f64) -> PoseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: &Vec3| v + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
    PoseParams {
        theta_r: jitter(&pose.theta_r),
        theta_b: pose.theta_b.iter().map(&mut jitter).collect(),
        t: jitter(&pose.t),
        beta: pose.beta.clone(),
    }
}

fn grad_error(pose: &PoseParams, term: impl Fn(&PoseParams) -> TermValue) -> f64 {
    let obj = FnObjective {
        dim: pose.to_flat().len(),
        value: |x: &[f64]| term(&pose.from_flat(x)).value,
        value_grad: |x: &[f64], g: &mut [f64]| {
            let v = term(&pose.from_flat(x));
            g.copy_from_slice(&v.gradient);
            v.value
        },
    };
    check_gradient(&obj, &pose.to_flat(), 1e-6)
}

#[test]
fn e_rec_vanishes_at_the_generating_pose_and_ignores_rigid_motion() {
    let cap = clean();
    let m = &cap.model;
    for t in [0, 20, 40] {
        let pose = &cap.gt_poses[t];
        let v = e_rec(m, pose, &cap.em.frames[t], &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap();
        assert!(v.value < 1e-20, "E_rec at GT = {:e}", v.value);
        assert_eq!(v.skipped, 0);

        let wrong = perturbed(pose, t as u64, 0.1);
        let a = e_rec(m, &wrong, &cap.em.frames[t], &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap();
        let g = RigidTransform::new(Rotation::from_axis_angle(&Vec3::new(0.4, -1.2, 0.3)), Vec3::new(2.0, -0.5, 1.0));
        let moved = wrong.transformed(&g, &root_rest(cap));
        let b = e_rec(m, &moved, &cap.em.frames[t], &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap();
        assert!(a.value > 1e-3);
        assert!((a.value - b.value).abs() < 1e-10, "{} vs {}", a.value, b.value);
    }
}

#[test]
fn e_rec_single_sensor_offset_costs_lambda_p_d_squared() {
    let cap = clean();
    let mut readings = cap.em.frames[10].clone();
    let d = Vec3::new(0.003, -0.004, 0.012);
    readings[4].position += d;
    let v = e_rec(&cap.model, &cap.gt_poses[10], &readings, &cap.anchors, &cap.source_anchor, 2.5, 1.0).unwrap();
    let expect = 2.5 * d.norm_squared();
    assert!((v.value - expect).abs() < 1e-12 * expect.max(1.0) + 1e-15, "{} vs {expect}", v.value);

    // A sensor without a reading is skipped and counted.
    readings.remove(0);
    let v = e_rec(&cap.model, &cap.gt_poses[10], &readings, &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap();
    assert_eq!(v.skipped, 1);
}

#[test]
fn e_2d_reprojection_examples() {
    let cap = clean();
    let m = &cap.model;
    let pose = gt_device(cap, 5);
    let frame = &cap.frames[5];
    assert!(e_2d(m, &pose, frame, 0.5, 5.0).unwrap().value < 1e-16);

    let mut off = frame.clone();
    off.keypoints[3].x += 3.0;
    off.keypoints[3].y += 4.0;
    let v = e_2d(m, &pose, &off, 0.5, 5.0).unwrap();
    assert!((v.value - 12.5).abs() < 1e-6, "ρ = {}", v.value);

    let mut faint = off.clone();
    for k in &mut faint.keypoints {
        k.c = 0.49;
    }
    assert_eq!(e_2d(m, &pose, &faint, 0.5, 5.0).unwrap().value, 0.0);

    // Move the body behind the camera: confident keypoints are excluded.
    let cam = frame.camera_pose();
    let behind = pose.transformed(
        &RigidTransform::from_translation(cam.rotation.rotate(&Vec3::new(0.0, 0.0, -10.0))),
        &root_rest(cap),
    );
    let v = e_2d(m, &behind, frame, 0.5, 5.0).unwrap();
    assert_eq!(v.skipped, frame.keypoints.len());
    assert_eq!(v.value, 0.0);

    assert!(e_2d(m, &pose, frame, 1.5, 5.0).is_err());
}

#[test]
fn e_prior_examples() {
    let cap = clean();
    let s1 = &cap.gt_poses[0];
    assert_eq!(e_prior(s1, s1).unwrap().value, 0.0);
    let mut p = s1.clone();
    p.theta_b[7].y += 0.1;
    let v = e_prior(&p, s1).unwrap();
    assert!((v.value - 0.01).abs() < 1e-15);
    let idx = 3 + 3 * 7 + 1;
    assert!((v.gradient[idx] - 0.2).abs() < 1e-12);
    assert_eq!(v.gradient.iter().filter(|g| **g != 0.0).count(), 1);
}

#[test]
fn e_pcl_examples() {
    let cap = clean();
    let m = &cap.model;
    let pose = &cap.gt_poses[12];
    let mesh = m.skin_mesh(pose).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = mesh.sample_surface(&mut rng, 500);
    assert!(e_pcl(m, pose, &pts).unwrap().value < 1e-10);
    assert_eq!(e_pcl(m, pose, &[]).unwrap().value, 0.0);

    // Shifted body: each distance is at most |d|.
    let d = Vec3::new(0.0, 0.0, 0.01);
    let mut shifted = pose.clone();
    shifted.t += d;
    let v = e_pcl(m, &shifted, &pts).unwrap().value;
    assert!(v <= d.norm_squared() + 1e-15 && v > 0.2 * d.norm_squared(), "E_pcl = {v:e}");
}

#[test]
fn all_term_gradients_match_finite_differences() {
    let cap = clean();
    let m = &cap.model;
    let t = 17;
    let pose = perturbed(&gt_device(cap, t), 4, 0.05);
    let gt_w = perturbed(&cap.gt_poses[t], 5, 0.05);
    let e = grad_error(&gt_w, |p| {
        e_rec(m, p, &cap.em.frames[t], &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap()
    });
    assert!(e < 1e-4, "e_rec gradient error {e:e}");
    let e = grad_error(&pose, |p| e_2d(m, p, &cap.frames[t], 0.5, 100.0).unwrap());
    assert!(e < 1e-4, "e_2d gradient error {e:e}");
    let e = grad_error(&pose, |p| e_2d(m, p, &cap.frames[t], 0.5, 5.0).unwrap());
    assert!(e < 1e-4, "e_2d (σ = 5) gradient error {e:e}");
    let s1 = perturbed(&pose, 6, 0.1);
    let e = grad_error(&pose, |p| e_prior(p, &s1).unwrap());
    assert!(e < 1e-4, "e_prior gradient error {e:e}");
    // Points off the surface so closest features are stable.
    let mesh = m.skin_mesh(&gt_device(cap, t)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<Vec3> = mesh
        .sample_surface(&mut rng, 200)
        .into_iter()
        .map(|p| p + Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)))
        .collect();
    let e = grad_error(&pose, |p| e_pcl(m, p, &pts).unwrap());
    assert!(e < 1e-4, "e_pcl gradient error {e:e}");
}

#[test]
fn stage1_recovers_noiseless_poses() {
    let cap = clean();
    let out = stage1(&cap.model, &input(cap), &Stage1Config::default()).unwrap();
    assert_eq!(out.poses.len(), cap.gt_poses.len());
    assert!(out.interpolated.is_empty());
    let err = mpjpe(&joints(&cap.model, &out.poses), &joints(&cap.model, &cap.gt_poses), Alignment::Procrustes).unwrap();
    assert!(err.mean < 0.5, "stage 1 MPJPE-PA {} mm", err.mean);
    // The fit is expressed with the virtual source at the origin.
    let v = e_rec(&cap.model, &out.poses[0], &cap.em.frames[0], &cap.anchors, &cap.source_anchor, 1.0, 1.0).unwrap();
    assert!(v.value < 1e-12);
}

#[test]
fn stage1_without_sensors_returns_its_initialisation() {
    let cap = clean();
    let inp = SequenceInput {
        anchors: &[],
        ..input(cap)
    };
    let out = stage1(&cap.model, &inp, &Stage1Config::default()).unwrap();
    let first = &out.poses[0];
    for p in &out.poses {
        assert_eq!(p, first);
        let v = e_rec(&cap.model, p, &cap.em.frames[0], &[], &cap.source_anchor, 1.0, 1.0).unwrap();
        assert_eq!(v.value, 0.0);
    }
    assert!(first.theta_b.iter().all(|v| *v == Vec3::zeros()));
}

#[test]
fn stage1_noisy_regression_baseline() {
    let cap = capture(NoiseSpec::default(), 1.0, 11);
    let out = stage1(&cap.model, &input(&cap), &Stage1Config::default()).unwrap();
    let err = mpjpe(&joints(&cap.model, &out.poses), &joints(&cap.model, &cap.gt_poses), Alignment::Procrustes).unwrap();
    println!("stage 1 MPJPE-PA under EM noise: {:.3} mm", err.mean);
    assert!(err.mean < 12.0, "stage 1 MPJPE-PA {} mm", err.mean);
}

fn stage2_clean_config() -> Stage2Config {
    let mut c = Stage2Config::default();
    c.adam.iterations = 200;
    c
}

#[test]
fn stage2_lifts_noiseless_poses_into_the_device_world() {
    let cap = clean();
    let m = &cap.model;
    let s1 = stage1(m, &input(cap), &Stage1Config::default()).unwrap();
    let out = stage2(m, &s1.poses, &input(cap), &stage2_clean_config()).unwrap();
    let gt: Vec<PoseParams> = (0..cap.gt_poses.len()).map(|t| gt_device(cap, t)).collect();
    let pa = mpjpe(&joints(m, &out.poses), &joints(m, &gt), Alignment::Procrustes).unwrap();
    let raw = mpjpe(&joints(m, &out.poses), &joints(m, &gt), Alignment::Raw).unwrap();
    assert!(pa.mean < 1.0, "stage 2 MPJPE-PA {} mm", pa.mean);
    assert!(raw.mean < 1.0, "stage 2 world MPJPE {} mm", raw.mean);
    for r in &out.frames {
        assert!(r.accepted <= r.start, "{r:?}");
    }
    assert!(out.propagated.is_empty());
}

#[test]
fn stage2_handles_missing_keypoints_and_depth() {
    let cap = capture(NoiseSpec::zero(), 0.5, 4);
    let m = &cap.model;
    let s1 = stage1(m, &input(&cap), &Stage1Config::default()).unwrap();
    let mut frames = cap.frames.clone();
    // Frame 6: every keypoint dropped; depth remains.
    for k in &mut frames[6].keypoints {
        *k = Keypoint2D::missing();
    }
    // Frame 9: nothing at all.
    for k in &mut frames[9].keypoints {
        *k = Keypoint2D::missing();
    }
    frames[9].pointcloud.clear();
    frames[9].human_crop.clear();
    let inp = SequenceInput {
        frames: &frames,
        ..input(&cap)
    };
    let out = stage2(m, &s1.poses, &inp, &Stage2Config::default()).unwrap();
    assert_eq!(out.propagated, vec![9]);
    assert_eq!(out.poses[9], out.poses[8]);
    let d: f64 = out.poses[6]
        .theta_b
        .iter()
        .zip(&s1.poses[6].theta_b)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    assert!(d.sqrt() < 0.05, "body pose moved {} rad from stage 1", d.sqrt());
    assert_eq!(out.frames[6].keypoints_used, 0);
}

fn sequence(n: usize, f: impl Fn(f64) -> (Vec3, Vec3)) -> Vec<PoseParams> {
    let model = &clean().model;
    (0..n)
        .map(|i| {
            let (r, t) = f(i as f64 / 30.0);
            let mut p = PoseParams::zero(model);
            p.theta_r = r;
            p.theta_b[0] = r * 0.5;
            p.t = t;
            p
        })
        .collect()
}

fn max_diff(a: &[PoseParams], b: &[PoseParams]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| p.to_flat().into_iter().zip(q.to_flat()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn savgol_matches_tabulated_weights() {
    // Window 7, order 2: (−2, 3, 6, 7, 6, 3, −2) / 21.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = savgol_filter(&x, 7, 2).unwrap();
    let w = [-2.0, 3.0, 6.0, 7.0, 6.0, 3.0, -2.0];
    for i in 3..17 {
        let e: f64 = (0..7).map(|j| w[j] * x[i + j - 3]).sum::<f64>() / 21.0;
        assert!((y[i] - e).abs() < 1e-12);
    }
    // Quadratics are reproduced everywhere, edges included.
    let q: Vec<f64> = (0..20).map(|i| 1.0 - 0.5 * i as f64 + 0.25 * (i * i) as f64).collect();
    let yq = savgol_filter(&q, 7, 2).unwrap();
    assert!(q.iter().zip(&yq).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(savgol_filter(&x, 6, 2).is_err());
    assert!(savgol_filter(&x[..5], 7, 2).is_err());
}

#[test]
fn stage3_keeps_constant_and_quadratic_sequences() {
    let cfg = Stage3Config::default();
    let constant = sequence(20, |_| (Vec3::new(0.3, -0.8, 0.2), Vec3::new(1.0, 0.9, -2.0)));
    assert!(max_diff(&stage3(&constant, &cfg).unwrap(), &constant) < 1e-9);

    let quad = sequence(25, |s| (Vec3::new(0.1, 0.2, 0.0), Vec3::new(0.3 * s * s - s, 0.9, 2.0 * s)));
    let out = stage3(&quad, &cfg).unwrap();
    let t_err = out.iter().zip(&quad).map(|(a, b)| (a.t - b.t).norm()).fold(0.0, f64::max);
    assert!(t_err < 1e-9, "{t_err:e}");

    // Too short: returned unchanged.
    assert_eq!(stage3(&quad[..5], &cfg).unwrap(), quad[..5].to_vec());
}

#[test]
fn stage3_outputs_unit_quaternions_across_sign_flips() {
    // Root spinning through π, where axis-angle flips sides.
    let seq = sequence(40, |s| (Vec3::new(0.0, 1.0, 0.0) * (2.0 + 2.5 * s), Vec3::zeros()));
    let out = stage3(&seq, &Stage3Config::default()).unwrap();
    for (a, b) in out.iter().zip(&seq) {
        let qa = Rotation::from_axis_angle(&a.theta_r).to_quaternion();
        assert!((qa.as_ref().norm() - 1.0).abs() < 1e-9);
        let ang = Rotation::from_axis_angle(&a.theta_r).angle_to(&Rotation::from_axis_angle(&b.theta_r));
        assert!(ang < 1e-3, "{ang}");
    }
}

#[test]
fn stage3_reduces_jitter_without_moving_poses() {
    let cap = capture(NoiseSpec::zero(), 3.0, 9);
    let m = &cap.model;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let noisy: Vec<PoseParams> = cap
        .gt_poses
        .iter()
        .map(|p| perturbed(p, rng.random(), 0.01))
        .collect();
    let smooth = stage3(&noisy, &Stage3Config::default()).unwrap();
    let gt = joints(m, &cap.gt_poses);
    let (jn, js) = (joints(m, &noisy), joints(m, &smooth));
    let j_before = jitter(&jn, 30.0).unwrap().mean;
    let j_after = jitter(&js, 30.0).unwrap().mean;
    let e_before = mpjpe(&jn, &gt, Alignment::Procrustes).unwrap().mean;
    let e_after = mpjpe(&js, &gt, Alignment::Procrustes).unwrap().mean;
    assert!(j_after * 3.0 <= j_before, "jitter {j_before} → {j_after}");
    assert!((e_after - e_before).abs() < 2.0, "MPJPE-PA {e_before} → {e_after}");
}

#[test]
fn run_emp_is_deterministic_and_serialisable() {
    let cap = capture(NoiseSpec::default(), 0.5, 5);
    let cfg = EmpConfig::default();
    let a = run_emp(&cap.model, &input(&cap), &cfg).unwrap();
    let b = run_emp(&cap.model, &input(&cap), &cfg).unwrap();
    assert!(a.same_result(&b));
    assert_eq!(a.s3.as_ref().unwrap().len(), cap.gt_poses.len());
    assert_eq!(a.final_poses(), a.s3.as_deref().unwrap());
    let back = emfuse::pipeline::SequenceSolution::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let j_s2 = jitter(&joints(&cap.model, a.s2.as_ref().unwrap()), 30.0).unwrap().mean;
    let j_s3 = jitter(&joints(&cap.model, a.s3.as_ref().unwrap()), 30.0).unwrap().mean;
    assert!(j_s3 <= j_s2);
}

#[test]
fn run_emp_without_point_clouds_and_prefixes() {
    let cap = capture(NoiseSpec::zero(), 0.5, 6);
    let mut frames = cap.frames.clone();
    for f in &mut frames {
        f.pointcloud.clear();
        f.human_crop.clear();
    }
    let inp = SequenceInput {
        frames: &frames,
        ..input(&cap)
    };
    let out = run_emp(&cap.model, &inp, &EmpConfig::default()).unwrap();
    assert!(out.s3.is_some());
    assert!(out.s2_frames.iter().all(|r| r.points == 0));

    let only1 = EmpConfig {
        last_stage: Stage::One,
        ..EmpConfig::default()
    };
    let no_frames = SequenceInput {
        frames: &[],
        ..input(&cap)
    };
    let out = run_emp(&cap.model, &no_frames, &only1).unwrap();
    assert!(out.s2.is_none() && out.s3.is_none());
    assert!(run_emp(&cap.model, &no_frames, &EmpConfig::default()).is_err());
}

#[test]
fn run_emp_labels_errors_by_stage() {
    let cap = capture(NoiseSpec::zero(), 0.5, 7);
    let mut frames = cap.frames.clone();
    frames[2].keypoints.pop();
    let inp = SequenceInput {
        frames: &frames,
        ..input(&cap)
    };
    match run_emp(&cap.model, &inp, &EmpConfig::default()) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "stage 2"),
        other => panic!("expected a stage 2 error, got {other:?}"),
    }
}
