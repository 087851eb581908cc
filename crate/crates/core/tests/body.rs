use emfuse::body::toy::{self, JOINT_COUNT};
use emfuse::body::{
    anchor_frame, build_toy_humanoid, joint_limit_penalty, joint_limit_penalty_grad, virtual_sensor,
    virtual_sensor_backward, BodyModel, BodyModelAsset, PoseParams, SensorAnchor, ShapedBody,
};
use emfuse::geom::{Mat3, RigidTransform, Rotation, TriangleMesh, Vec3};
use nalgebra::Matrix4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> BodyModel {
    build_toy_humanoid(0).unwrap()
}

fn rvec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn random_pose(model: &BodyModel, rng: &mut ChaCha8Rng, s: f64) -> PoseParams {
    let mut p = PoseParams::zero(model);
    p.theta_r = rvec(rng, 1.5);
    for v in &mut p.theta_b {
        *v = rvec(rng, s);
    }
    p.t = rvec(rng, 1.0);
    for b in &mut p.beta {
        *b = rng.random_range(-1.0..1.0);
    }
    p
}

fn homogeneous(r: &Rotation, t: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Naive per-joint chain product of homogeneous transforms.
fn chain_oracle(model: &BodyModel, pose: &PoseParams) -> Vec<Vec3> {
    let shaped = ShapedBody::new(model, &pose.beta).unwrap();
    (0..model.joint_count())
        .map(|j| {
            let mut chain = vec![j];
            while let Some(p) = model.parent(*chain.last().unwrap()) {
                chain.push(p);
            }
            chain.reverse();
            let mut m = Matrix4::identity();
            for &k in &chain {
                let r = Rotation::from_axis_angle(&pose.joint_axis_angle(k));
                let offset = match model.parent(k) {
                    None => shaped.joints[k] + pose.t,
                    Some(p) => shaped.joints[k] - shaped.joints[p],
                };
                m *= homogeneous(&r, &offset);
            }
            Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])
        })
        .collect()
}

#[test]
fn toy_is_deterministic_and_valid() {
    let a = build_toy_humanoid(5).unwrap();
    let b = build_toy_humanoid(5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_toy_humanoid(6).unwrap());
    a.validate().unwrap();
    assert_eq!(a.joint_count(), 24);
    assert_eq!(a.shape_count(), 10);
    assert_eq!(a.keypoint_count(), 25);
    assert!((500..=700).contains(&a.vertex_count()));
    for row in a.skinning() {
        assert!(row.len() <= 4);
        assert!((row.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for (j, p) in a.parents().iter().enumerate().skip(1) {
        assert!(p.unwrap() < j);
    }
    let mesh = a.template_mesh();
    assert!(mesh.is_watertight());
}

#[test]
fn toy_capsules_enclose_positive_volume() {
    let m = model();
    let mesh = m.template_mesh();
    let per_capsule = mesh.faces.len() / JOINT_COUNT;
    for j in 0..JOINT_COUNT {
        let vol: f64 = mesh.faces[j * per_capsule..(j + 1) * per_capsule]
            .iter()
            .map(|f| mesh.vertices[f[0]].dot(&mesh.vertices[f[1]].cross(&mesh.vertices[f[2]])) / 6.0)
            .sum();
        assert!(vol > 0.0, "capsule {j} has volume {vol}");
    }
}

#[test]
fn zero_pose_gives_rest_joints_and_template() {
    let m = model();
    let pose = PoseParams::zero(&m);
    let (joints, rots) = m.forward_kinematics(&pose).unwrap();
    let shaped = ShapedBody::new(&m, &pose.beta).unwrap();
    for (a, b) in joints.iter().zip(&shaped.joints) {
        assert!((a - b).norm() < 1e-15);
    }
    assert!(rots.iter().all(|r| r.angle() == 0.0));
    let mesh = m.skin_mesh(&pose).unwrap();
    assert_eq!(mesh.vertices, m.template());
}

#[test]
fn kinematics_match_chain_oracle() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let pose = random_pose(&m, &mut rng, 1.0);
        let (joints, _) = m.forward_kinematics(&pose).unwrap();
        for (a, b) in joints.iter().zip(chain_oracle(&m, &pose)) {
            assert!((a - b).norm() < 1e-10);
        }
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let m = model();
    let mut pose = PoseParams::zero(&m);
    pose.theta_b.pop();
    assert!(m.forward_kinematics(&pose).is_err());
    assert!(m.skin_mesh(&pose).is_err());
    let mut pose = PoseParams::zero(&m);
    pose.beta.push(0.0);
    assert!(m.skin_mesh(&pose).is_err());
    let mesh = TriangleMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 2]]).unwrap();
    assert!(m.regress_keypoints(&mesh).is_err());
}

#[test]
fn root_rotation_is_rigid_about_root() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pose = random_pose(&m, &mut rng, 0.5);
    pose.theta_r = Vec3::zeros();
    pose.t = Vec3::zeros();
    let (j0, _) = m.forward_kinematics(&pose).unwrap();
    let rz = Rotation::about_z(0.8);
    pose.theta_r = rz.to_axis_angle();
    let (j1, _) = m.forward_kinematics(&pose).unwrap();
    let root = j0[0];
    for (a, b) in j0.iter().zip(&j1) {
        assert!((rz.rotate(&(a - root)) + root - b).norm() < 1e-12);
    }
}

#[test]
fn rigid_root_motion_moves_template_rigidly() {
    let m = model();
    let mut pose = PoseParams::zero(&m);
    let r = Rotation::from_axis_angle(&Vec3::new(0.3, -1.1, 0.4));
    pose.theta_r = r.to_axis_angle();
    pose.t = Vec3::new(0.5, 1.0, -2.0);
    let mesh = m.skin_mesh(&pose).unwrap();
    let root = ShapedBody::new(&m, &pose.beta).unwrap().joints[0];
    for (v, rest) in mesh.vertices.iter().zip(m.template()) {
        let expect = r.rotate(&(rest - root)) + root + pose.t;
        assert!((v - expect).norm() < 1e-10);
    }
}

#[test]
fn fully_weighted_vertex_follows_its_joint() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pose = random_pose(&m, &mut rng, 0.8);
    let mesh = m.skin_mesh(&pose).unwrap();
    let (joints, rots) = m.forward_kinematics(&pose).unwrap();
    let shaped = ShapedBody::new(&m, &pose.beta).unwrap();
    let v = toy::capsule_vertex(4, 2, 3);
    assert_eq!(m.skinning()[v], vec![(4, 1.0)]);
    let expect = rots[4].rotate(&(shaped.vertices[v] - shaped.joints[4])) + joints[4];
    assert!((mesh.vertices[v] - expect).norm() < 1e-12);
}

fn with_keypoint_regressor(m: &BodyModel, triplets: Vec<(usize, usize, f64)>, count: usize) -> BodyModel {
    let mut asset = BodyModelAsset::from(m.clone());
    asset.keypoint_regressor = triplets;
    asset.keypoint_count = count;
    BodyModel::try_from(asset).unwrap()
}

#[test]
fn keypoint_regression_examples() {
    let m = model();
    let mesh = m.template_mesh();
    let one_hot = with_keypoint_regressor(&m, vec![(0, 17, 1.0)], 1);
    assert_eq!(one_hot.regress_keypoints(&mesh).unwrap()[0], mesh.vertices[17]);
    let mid = with_keypoint_regressor(&m, vec![(0, 3, 0.5), (0, 40, 0.5)], 1);
    let got = mid.regress_keypoints(&mesh).unwrap()[0];
    assert!((got - (mesh.vertices[3] + mesh.vertices[40]) / 2.0).norm() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = m.vertex_count();
    let dense: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let triplets = dense
        .iter()
        .enumerate()
        .flat_map(|(k, row)| row.iter().enumerate().map(move |(v, &w)| (k, v, w)))
        .collect();
    let random = with_keypoint_regressor(&m, triplets, 5);
    let got = random.regress_keypoints(&mesh).unwrap();
    for (k, row) in dense.iter().enumerate() {
        let mut acc = [0.0; 3];
        for (v, w) in row.iter().enumerate() {
            for c in 0..3 {
                acc[c] += w * mesh.vertices[v][c];
            }
        }
        assert!((got[k] - Vec3::from(acc)).norm() < 1e-12);
    }
}

#[test]
fn virtual_sensor_examples() {
    let m = model();
    let mesh = m.template_mesh();
    let anchor = toy::sensor_anchors(&m).unwrap().remove(2);
    let frame = anchor_frame(&mesh.vertices, &mesh.faces, &anchor).unwrap();
    let (p, r) = virtual_sensor(&mesh, &anchor).unwrap();
    assert_eq!(p, mesh.vertices[anchor.anchor_vertex]);
    assert!((r.matrix() - frame.rotation.matrix()).abs().max() < 1e-15);
    Rotation::from_matrix(*r.matrix()).unwrap();

    // A vertex whose frame is the identity: a flat fan in the xy-plane.
    let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), -Vec3::x(), -Vec3::y()];
    let faces = vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
    let flat = TriangleMesh::new(verts, faces.clone()).unwrap();
    let a = SensorAnchor::new(0, 0, 1, &faces).unwrap().with_offset(Rotation::identity(), Vec3::new(0.0, 0.0, 0.03));
    let (p, r) = virtual_sensor(&flat, &a).unwrap();
    assert!(r.angle() < 1e-15);
    assert!((p - Vec3::new(0.0, 0.0, 0.03)).norm() < 1e-15);
}

#[test]
fn virtual_sensor_rejects_degenerate_frame() {
    let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
    let faces = vec![[0, 1, 2]];
    let mesh = TriangleMesh::new(verts, faces.clone()).unwrap();
    let a = SensorAnchor::new(0, 0, 3, &faces).unwrap();
    assert!(virtual_sensor(&mesh, &a).is_err());
    assert!(SensorAnchor::new(0, 1, 1, &faces).is_err());
}

#[test]
fn virtual_sensor_commutes_with_rigid_motion() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pose = random_pose(&m, &mut rng, 0.6);
    let mesh = m.skin_mesh(&pose).unwrap();
    for anchor in toy::sensor_anchors(&m).unwrap() {
        let anchor = anchor.with_offset(Rotation::from_axis_angle(&rvec(&mut rng, 0.5)), rvec(&mut rng, 0.05));
        let g = RigidTransform::new(Rotation::from_axis_angle(&rvec(&mut rng, 3.0)), rvec(&mut rng, 2.0));
        let moved = mesh.transformed(|v| g.apply(v));
        let (p0, r0) = virtual_sensor(&mesh, &anchor).unwrap();
        let (p1, r1) = virtual_sensor(&moved, &anchor).unwrap();
        assert!((g.apply(&p0) - p1).norm() < 1e-10);
        assert!(((g.rotation * r0).matrix() - r1.matrix()).abs().max() < 1e-10);
    }
}

#[test]
fn joint_limit_penalty_examples() {
    let m = model();
    let mut pose = PoseParams::zero(&m);
    assert_eq!(joint_limit_penalty(&m, &pose), 0.0);
    pose.theta_b[0].x = 2.6;
    assert!((joint_limit_penalty(&m, &pose) - 0.01).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let pose = random_pose(&m, &mut rng, 3.5);
        let mut oracle = 0.0;
        for (j, theta) in pose.theta_b.iter().enumerate() {
            for k in 0..3 {
                let (lo, hi) = m.joint_limit(j + 1)[k];
                let c = theta[k].clamp(lo, hi);
                oracle += (theta[k] - c).powi(2);
            }
        }
        assert!((joint_limit_penalty(&m, &pose) - oracle).abs() < 1e-12);
    }
}

#[test]
fn joint_limit_gradient_matches_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pose = random_pose(&m, &mut rng, 3.0);
    let x = pose.to_flat();
    let mut g = vec![0.0; x.len()];
    joint_limit_penalty_grad(&m, &pose, Some((&mut g, 1.0)));
    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (joint_limit_penalty(&m, &pose.from_flat(&xp)) - joint_limit_penalty(&m, &pose.from_flat(&xm))) / (2.0 * h);
        assert!((fd - g[i]).abs() / g[i].abs().max(1.0) < 1e-4, "coordinate {i}: {fd} vs {}", g[i]);
    }
}

/// L = Σ_s a_s·p_s + ⟨B_s, R_s⟩ + Σ_v c_v·v + Σ_j d_j·X_j + Σ_k e_k·x_k.
struct Probe {
    a: Vec<Vec3>,
    b: Vec<Mat3>,
    c: Vec<Vec3>,
    d: Vec<Vec3>,
    e: Vec<Vec3>,
}

fn probe_value(m: &BodyModel, anchors: &[SensorAnchor], probe: &Probe, pose: &PoseParams) -> f64 {
    let shaped = ShapedBody::new(m, &pose.beta).unwrap();
    let state = m.pose_state(&shaped, pose, true).unwrap();
    let mut l = 0.0;
    for (s, anchor) in anchors.iter().enumerate() {
        let frame = anchor_frame(&state.vertices, m.faces(), anchor).unwrap();
        let (p, r) = emfuse::body::sensor::apply_anchor_offset(&frame, anchor);
        l += probe.a[s].dot(&p) + probe.b[s].component_mul(r.matrix()).sum();
    }
    l += state.vertices.iter().zip(&probe.c).map(|(v, c)| v.dot(c)).sum::<f64>();
    l += state.joints.iter().zip(&probe.d).map(|(v, c)| v.dot(c)).sum::<f64>();
    let kp = m.regress_keypoints_from(&state.vertices).unwrap();
    l += kp.iter().zip(&probe.e).map(|(v, c)| v.dot(c)).sum::<f64>();
    l
}

fn probe_gradient(m: &BodyModel, anchors: &[SensorAnchor], probe: &Probe, pose: &PoseParams) -> (Vec<f64>, Vec<f64>) {
    let shaped = ShapedBody::new(m, &pose.beta).unwrap();
    let state = m.pose_state(&shaped, pose, true).unwrap();
    let mut gv = probe.c.clone();
    for (s, anchor) in anchors.iter().enumerate() {
        let frame = anchor_frame(&state.vertices, m.faces(), anchor).unwrap();
        virtual_sensor_backward(&state.vertices, m.faces(), anchor, &frame, &probe.a[s], &probe.b[s], &mut gv);
    }
    m.keypoint_backward(&probe.e, &mut gv);
    let g = m.backward(&shaped, pose, &state, &gv, &probe.d, true);
    (g.to_flat(), g.beta.unwrap())
}

#[test]
fn analytic_gradients_match_central_differences() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let anchors: Vec<SensorAnchor> = toy::sensor_anchors(&m)
        .unwrap()
        .into_iter()
        .map(|a| a.with_offset(Rotation::from_axis_angle(&rvec(&mut rng, 0.5)), rvec(&mut rng, 0.05)))
        .collect();
    let probe = Probe {
        a: (0..anchors.len()).map(|_| rvec(&mut rng, 1.0)).collect(),
        b: (0..anchors.len()).map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
        c: (0..m.vertex_count()).map(|_| rvec(&mut rng, 0.1)).collect(),
        d: (0..m.joint_count()).map(|_| rvec(&mut rng, 1.0)).collect(),
        e: (0..m.keypoint_count()).map(|_| rvec(&mut rng, 1.0)).collect(),
    };
    let pose = random_pose(&m, &mut rng, 0.7);
    let (g, gb) = probe_gradient(&m, &anchors, &probe, &pose);
    let x = pose.to_flat();
    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (probe_value(&m, &anchors, &probe, &pose.from_flat(&xp)) - probe_value(&m, &anchors, &probe, &pose.from_flat(&xm))) / (2.0 * h);
        assert!((fd - g[i]).abs() / g[i].abs().max(1.0) < 1e-4, "pose coordinate {i}: {fd} vs {}", g[i]);
    }
    for b in 0..m.shape_count() {
        let mut pp = pose.clone();
        let mut pm = pose.clone();
        pp.beta[b] += h;
        pm.beta[b] -= h;
        let fd = (probe_value(&m, &anchors, &probe, &pp) - probe_value(&m, &anchors, &probe, &pm)) / (2.0 * h);
        assert!((fd - gb[b]).abs() / gb[b].abs().max(1.0) < 1e-4, "beta {b}: {fd} vs {}", gb[b]);
    }
}

#[test]
fn shape_displacement_bounded_by_basis_norm() {
    let m = model();
    let bound = m.shape_basis_norm();
    assert!(bound > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let beta: Vec<f64> = (0..m.shape_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let shaped = ShapedBody::new(&m, &beta).unwrap();
        let disp: f64 = shaped.vertices.iter().zip(m.template()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let bn = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(disp <= bound * bn * (1.0 + 1e-9));
    }
}

#[test]
fn asset_json_round_trip_and_validation() {
    let m = model();
    let json = m.to_json().unwrap();
    let back = BodyModel::from_json(&json).unwrap();
    assert_eq!(back, m);

    let mut asset = BodyModelAsset::from(m.clone());
    asset.skinning_weights[0].2 = 0.7;
    assert!(BodyModel::try_from(asset).is_err());
    let mut asset = BodyModelAsset::from(m.clone());
    asset.parents[5] = 7;
    assert!(BodyModel::try_from(asset).is_err());
    let mut asset = BodyModelAsset::from(m.clone());
    asset.joint_limits[0][0] = [0.1, 1.0];
    assert!(BodyModel::try_from(asset).is_err());
    let mut asset = BodyModelAsset::from(m);
    asset.faces[0] = [0, 0, 1];
    assert!(BodyModel::try_from(asset).is_err());
}

#[test]
fn toy_layout_helpers() {
    let m = model();
    let anchors = toy::sensor_anchors(&m).unwrap();
    assert_eq!(anchors.len(), 12);
    let src = toy::source_anchor(&m).unwrap();
    assert_eq!(m.skinning()[src.anchor_vertex], vec![(0, 1.0)]);
    for a in &anchors {
        assert_eq!(m.skinning()[a.anchor_vertex].len(), 1);
    }
    let back = toy::lower_back_vertices(&m);
    assert_eq!(back.len(), 8);
    for v in back {
        assert!(m.template()[v].z < 0.0);
    }
    let locked = m.locked_axes();
    assert_eq!(locked.len(), 69);
    assert!(locked[3 * 2]); // spine1 x
    assert!(!locked[0]); // left hip x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_are_equivariant_under_root_motion(seed in 0u64..10_000) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&m, &mut rng, 0.8);
        let g = RigidTransform::new(Rotation::from_axis_angle(&rvec(&mut rng, 3.0)), rvec(&mut rng, 3.0));
        let root_rest = ShapedBody::new(&m, &pose.beta).unwrap().joints[0];
        let moved = pose.transformed(&g, &root_rest);
        let a = m.skin_mesh(&pose).unwrap();
        let b = m.skin_mesh(&moved).unwrap();
        for (u, v) in a.vertices.iter().zip(&b.vertices) {
            prop_assert!((g.apply(u) - v).norm() < 1e-9);
        }
        let (ja, ra) = m.forward_kinematics(&pose).unwrap();
        let (jb, rb) = m.forward_kinematics(&moved).unwrap();
        for (u, v) in ja.iter().zip(&jb) {
            prop_assert!((g.apply(u) - v).norm() < 1e-9);
        }
        for (u, v) in ra.iter().zip(&rb) {
            prop_assert!(((g.rotation * *u).matrix() - v.matrix()).abs().max() < 1e-9);
        }
    }
}
