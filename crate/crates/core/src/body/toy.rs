//! A deterministic low-poly humanoid with an SMPL-like 24-joint tree.
//!
//! Every joint owns one closed capsule running from the joint towards its
//! child. Capsules have 4 rings of 6 vertices plus two poles; ring 0 is
//! centred on the joint, so the joint regressor is the ring-0 average.
//! The 25-keypoint regressor follows the BODY_25 ordering but is only a
//! stand-in for a learned regressor.
//!
//! Pelvis at the origin, `+y` up, facing `+z`, the body's left on `+x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{BodyModel, BodyModelParts, SparseRow};
use super::sensor::SensorAnchor;
use crate::error::Result;
use crate::geom::Vec3;

pub const JOINT_COUNT: usize = 24;
pub const SHAPE_COUNT: usize = 10;
pub const KEYPOINT_COUNT: usize = 25;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
];

pub const PARENTS: [i64; JOINT_COUNT] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

pub const SHAPE_NAMES: [&str; SHAPE_COUNT] = [
    "scale", "leg_length", "arm_length", "torso_girth", "limb_girth", "torso_height", "shoulder_width",
    "hip_width", "head_size", "belly",
];

/// Joints carrying a body-worn sensor, in sensor-id order.
pub const SENSOR_JOINTS: [usize; 12] = [1, 2, 4, 5, 7, 8, 16, 17, 18, 19, 15, 9];

pub const RING_SEGMENTS: usize = 6;
pub const RINGS: usize = 4;
pub const CAPSULE_VERTICES: usize = RING_SEGMENTS * RINGS + 2;

const LEGS: [usize; 8] = [1, 2, 4, 5, 7, 8, 10, 11];
const ARMS: [usize; 8] = [16, 17, 18, 19, 20, 21, 22, 23];
const TORSO: [usize; 4] = [0, 3, 6, 9];
/// Joints with every axis locked: the toy spine, neck, collars, wrists,
/// hands and toes are rigid.
const RIGID: [usize; 11] = [3, 6, 10, 11, 12, 13, 14, 20, 21, 22, 23];
const FREE_LIMIT: f64 = 2.5;

pub fn capsule_vertex(joint: usize, ring: usize, k: usize) -> usize {
    joint * CAPSULE_VERTICES + ring * RING_SEGMENTS + (k % RING_SEGMENTS)
}

pub fn proximal_pole(joint: usize) -> usize {
    joint * CAPSULE_VERTICES + RING_SEGMENTS * RINGS
}

pub fn distal_pole(joint: usize) -> usize {
    proximal_pole(joint) + 1
}

fn rest_joints(rng: &mut ChaCha8Rng) -> [Vec3; JOINT_COUNT] {
    let mut jit = |amp: f64| 1.0 + amp * rng.random_range(-1.0..1.0);
    let height = jit(0.04);
    let leg = jit(0.03) * height;
    let arm = jit(0.03) * height;
    let torso = jit(0.03) * height;
    let width = jit(0.04);
    let v = Vec3::new;
    let mut j = [Vec3::zeros(); JOINT_COUNT];
    for side in [1.0, -1.0] {
        let (hip, knee, ankle, foot, collar, shoulder, elbow, wrist, hand) = if side > 0.0 {
            (1, 4, 7, 10, 13, 16, 18, 20, 22)
        } else {
            (2, 5, 8, 11, 14, 17, 19, 21, 23)
        };
        j[hip] = v(side * 0.09 * width, -0.08 * torso, 0.0);
        j[knee] = j[hip] + v(side * 0.01, -0.38 * leg, 0.005);
        j[ankle] = j[knee] + v(0.0, -0.40 * leg, -0.025);
        j[foot] = j[ankle] + v(side * 0.01, -0.06 * leg, 0.12 * leg);
        j[collar] = v(side * 0.07 * width, 0.44 * torso, -0.01);
        j[shoulder] = j[collar] + v(side * 0.11 * width, 0.02 * torso, 0.0);
        j[elbow] = j[shoulder] + v(side * 0.26 * arm, 0.0, 0.0);
        j[wrist] = j[elbow] + v(side * 0.25 * arm, 0.0, 0.0);
        j[hand] = j[wrist] + v(side * 0.09 * arm, 0.0, 0.0);
    }
    j[3] = v(0.0, 0.11 * torso, -0.01);
    j[6] = v(0.0, 0.24 * torso, 0.0);
    j[9] = v(0.0, 0.31 * torso, 0.01);
    j[12] = v(0.0, 0.53 * torso, -0.01);
    j[15] = v(0.0, 0.62 * torso, 0.02);
    j
}

fn segment_end(j: usize, joints: &[Vec3; JOINT_COUNT], head_len: f64) -> Vec3 {
    let child = match j {
        0 => Some(3),
        9 => Some(12),
        10 | 11 | 15 | 22 | 23 => None,
        _ => PARENTS.iter().position(|&p| p == j as i64),
    };
    match child {
        Some(c) => joints[c],
        None => {
            let side = joints[j].x.signum();
            joints[j]
                + match j {
                    10 | 11 => Vec3::new(0.0, -0.01, 0.07),
                    15 => Vec3::new(0.0, head_len, 0.0),
                    _ => Vec3::new(side * 0.08, 0.0, 0.0),
                }
        }
    }
}

fn radius(j: usize) -> f64 {
    match j {
        0 => 0.11,
        3 => 0.10,
        6 => 0.11,
        9 => 0.12,
        12 => 0.05,
        15 => 0.09,
        13 | 14 => 0.045,
        16 | 17 => 0.045,
        18 | 19 => 0.038,
        20 | 21 | 22 | 23 => 0.03,
        1 | 2 => 0.07,
        4 | 5 => 0.05,
        7 | 8 => 0.04,
        _ => 0.035,
    }
}

struct CapsuleVertex {
    joint: usize,
    /// Offset from the capsule axis.
    radial: Vec3,
}

/// Builds the toy model. Proportions are jittered deterministically by
/// `seed`; the topology and vertex layout do not depend on it.
pub fn build_toy_humanoid(seed: u64) -> Result<BodyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joints = rest_joints(&mut rng);
    let girth = 1.0 + 0.05 * rng.random_range(-1.0..1.0);
    let head_len = 0.2 * (1.0 + 0.03 * rng.random_range(-1.0..1.0));

    let mut template = Vec::with_capacity(JOINT_COUNT * CAPSULE_VERTICES);
    let mut info = Vec::with_capacity(JOINT_COUNT * CAPSULE_VERTICES);
    let mut faces = Vec::new();
    let mut skinning: Vec<SparseRow> = Vec::new();

    for j in 0..JOINT_COUNT {
        let start = joints[j];
        let end = segment_end(j, &joints, head_len);
        let axis = end - start;
        let d = axis / axis.norm();
        let reference = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = reference.cross(&d).normalize();
        let w = d.cross(&u);
        let r = radius(j) * girth;
        let parent = usize::try_from(PARENTS[j]).ok();
        let blended = |row: &mut Vec<SparseRow>| match parent {
            Some(p) => row.push(vec![(j, 0.5), (p, 0.5)]),
            None => row.push(vec![(j, 1.0)]),
        };
        for ring in 0..RINGS {
            let centre = start + axis * (ring as f64 / (RINGS - 1) as f64);
            for k in 0..RING_SEGMENTS {
                let phi = std::f64::consts::TAU * k as f64 / RING_SEGMENTS as f64;
                let radial = (u * phi.cos() + w * phi.sin()) * r;
                template.push(centre + radial);
                info.push(CapsuleVertex { joint: j, radial });
                if ring == 0 {
                    blended(&mut skinning);
                } else {
                    skinning.push(vec![(j, 1.0)]);
                }
            }
        }
        template.push(start - d * (0.6 * r));
        info.push(CapsuleVertex {
            joint: j,
            radial: Vec3::zeros(),
        });
        blended(&mut skinning);
        template.push(end + d * (0.6 * r));
        info.push(CapsuleVertex {
            joint: j,
            radial: Vec3::zeros(),
        });
        skinning.push(vec![(j, 1.0)]);

        for ring in 0..RINGS - 1 {
            for k in 0..RING_SEGMENTS {
                let a = capsule_vertex(j, ring, k);
                let b = capsule_vertex(j, ring, k + 1);
                let c = capsule_vertex(j, ring + 1, k + 1);
                let e = capsule_vertex(j, ring + 1, k);
                faces.push([a, b, c]);
                faces.push([a, c, e]);
            }
        }
        for k in 0..RING_SEGMENTS {
            faces.push([proximal_pole(j), capsule_vertex(j, 0, k + 1), capsule_vertex(j, 0, k)]);
            faces.push([distal_pole(j), capsule_vertex(j, RINGS - 1, k), capsule_vertex(j, RINGS - 1, k + 1)]);
        }
    }

    let joint_regressor = (0..JOINT_COUNT)
        .map(|j| {
            (0..RING_SEGMENTS)
                .map(|k| (capsule_vertex(j, 0, k), 1.0 / RING_SEGMENTS as f64))
                .collect()
        })
        .collect();

    let shape_dirs = shape_basis(&template, &info, &joints);
    let keypoint_regressor = keypoints(&template, &joints, head_len);

    let joint_limits = (1..JOINT_COUNT)
        .map(|j| {
            let free = (-FREE_LIMIT, FREE_LIMIT);
            let none = (0.0, 0.0);
            match j {
                _ if RIGID.contains(&j) => [none; 3],
                4 | 5 => [(0.0, FREE_LIMIT), none, none],
                18 => [none, (-FREE_LIMIT, 0.0), none],
                19 => [none, (0.0, FREE_LIMIT), none],
                _ => [free; 3],
            }
        })
        .collect();

    BodyModel::from_parts(BodyModelParts {
        parents: PARENTS.iter().map(|&p| usize::try_from(p).ok()).collect(),
        template,
        faces,
        skinning,
        shape_dirs,
        joint_regressor,
        keypoint_regressor,
        joint_limits,
    })
}

fn side_of(j: usize, joints: &[Vec3; JOINT_COUNT]) -> f64 {
    if joints[j].x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn shape_basis(template: &[Vec3], info: &[CapsuleVertex], joints: &[Vec3; JOINT_COUNT]) -> Vec<Vec<Vec3>> {
    let mut dirs = vec![vec![Vec3::zeros(); template.len()]; SHAPE_COUNT];
    for (i, (p, meta)) in template.iter().zip(info).enumerate() {
        let j = meta.joint;
        let side = side_of(j, joints);
        dirs[0][i] = p * 0.05;
        if LEGS.contains(&j) {
            dirs[1][i] = Vec3::new(0.0, 0.06 * (p.y - joints[1].y), 0.0);
            dirs[4][i] = meta.radial * 0.15;
            dirs[7][i] = Vec3::new(0.02 * side, 0.0, 0.0);
        }
        if ARMS.contains(&j) {
            let shoulder = if side > 0.0 { joints[16] } else { joints[17] };
            dirs[2][i] = Vec3::new(0.08 * (p.x - shoulder.x), 0.0, 0.0);
            dirs[4][i] = meta.radial * 0.15;
            dirs[6][i] = Vec3::new(0.03 * side, 0.0, 0.0);
        }
        if j == 13 || j == 14 {
            let collar = joints[j].x.abs();
            let shoulder = joints[j + 3].x.abs();
            let f = ((p.x.abs() - collar) / (shoulder - collar)).clamp(0.0, 1.0);
            dirs[6][i] = Vec3::new(0.03 * side * f, 0.0, 0.0);
        }
        if TORSO.contains(&j) {
            dirs[3][i] = meta.radial * 0.15;
            if j != 9 {
                dirs[9][i] = Vec3::new(0.0, 0.0, 0.25 * meta.radial.z.max(0.0));
            }
        }
        dirs[5][i] = Vec3::new(0.0, 0.06 * p.y.max(0.0), 0.0);
        if j == 15 {
            dirs[8][i] = (p - joints[15]) * 0.12;
        }
    }
    dirs
}

/// Inverse-distance blend of the three capsule vertices nearest a target.
fn blend_near(template: &[Vec3], joint: usize, target: Vec3) -> SparseRow {
    let mut cands: Vec<(usize, f64)> = (0..CAPSULE_VERTICES)
        .map(|k| {
            let v = joint * CAPSULE_VERTICES + k;
            (v, (template[v] - target).norm())
        })
        .collect();
    cands.sort_by(|a, b| a.1.total_cmp(&b.1));
    let near = &cands[..3];
    let w: Vec<f64> = near.iter().map(|(_, d)| 1.0 / (d + 1e-3)).collect();
    let sum: f64 = w.iter().sum();
    near.iter().zip(&w).map(|(&(v, _), wi)| (v, wi / sum)).collect()
}

fn ring0(joint: usize) -> SparseRow {
    (0..RING_SEGMENTS)
        .map(|k| (capsule_vertex(joint, 0, k), 1.0 / RING_SEGMENTS as f64))
        .collect()
}

fn keypoints(template: &[Vec3], joints: &[Vec3; JOINT_COUNT], head_len: f64) -> Vec<SparseRow> {
    let head = joints[15];
    let face = |dx: f64, dy: f64, dz: f64| blend_near(template, 15, head + Vec3::new(dx, dy * head_len / 0.2, dz));
    let toe = |foot: usize, dx: f64| {
        let tip = segment_end(foot, joints, head_len);
        blend_near(template, foot, tip + Vec3::new(dx, 0.0, 0.0))
    };
    let heel = |ankle: usize| blend_near(template, ankle, joints[ankle] + Vec3::new(0.0, -0.04, -0.06));
    vec![
        face(0.0, 0.08, 0.1),
        ring0(12),
        ring0(17),
        ring0(19),
        ring0(21),
        ring0(16),
        ring0(18),
        ring0(20),
        ring0(0),
        ring0(2),
        ring0(5),
        ring0(8),
        ring0(1),
        ring0(4),
        ring0(7),
        face(-0.035, 0.11, 0.08),
        face(0.035, 0.11, 0.08),
        face(-0.09, 0.09, 0.0),
        face(0.09, 0.09, 0.0),
        toe(10, -0.02),
        toe(10, 0.03),
        heel(7),
        toe(11, 0.02),
        toe(11, -0.03),
        heel(8),
    ]
}

/// Ring vertex of `joint`'s capsule whose radial direction best matches
/// `dir` in the rest pose.
fn facing_vertex(model: &BodyModel, joint: usize, ring: usize, dir: &Vec3) -> usize {
    let centre = (0..RING_SEGMENTS)
        .map(|k| model.template()[capsule_vertex(joint, ring, k)])
        .sum::<Vec3>()
        / RING_SEGMENTS as f64;
    (0..RING_SEGMENTS)
        .max_by(|&a, &b| {
            let da = (model.template()[capsule_vertex(joint, ring, a)] - centre).dot(dir);
            let db = (model.template()[capsule_vertex(joint, ring, b)] - centre).dot(dir);
            da.total_cmp(&db)
        })
        .expect("ring is non-empty")
}

fn ring_anchor(model: &BodyModel, id: usize, joint: usize, dir: Vec3) -> Result<SensorAnchor> {
    let k = facing_vertex(model, joint, 1, &dir);
    SensorAnchor::new(id, capsule_vertex(joint, 1, k), capsule_vertex(joint, 1, k + 1), model.faces())
}

/// Anchors for the twelve body-worn sensors, with identity offsets.
pub fn sensor_anchors(model: &BodyModel) -> Result<Vec<SensorAnchor>> {
    SENSOR_JOINTS
        .iter()
        .enumerate()
        .map(|(id, &j)| {
            let dir = match j {
                9 | 15 => -Vec3::z(),
                16..=19 => Vec3::y(),
                _ => Vec3::z(),
            };
            ring_anchor(model, id, j, dir)
        })
        .collect()
}

/// Anchor for the EM source worn on the lower back.
pub fn source_anchor(model: &BodyModel) -> Result<SensorAnchor> {
    ring_anchor(model, SENSOR_JOINTS.len(), 0, -Vec3::z())
}

/// Eight back-facing vertices of the pelvis and lower spine.
pub fn lower_back_vertices(model: &BodyModel) -> Vec<usize> {
    let back = -Vec3::z();
    let mut out = Vec::with_capacity(8);
    for (joint, ring) in [(0, 1), (0, 2), (0, 3), (3, 1)] {
        let centre = (0..RING_SEGMENTS)
            .map(|k| model.template()[capsule_vertex(joint, ring, k)])
            .sum::<Vec3>()
            / RING_SEGMENTS as f64;
        let mut ks: Vec<usize> = (0..RING_SEGMENTS).collect();
        ks.sort_by(|&a, &b| {
            let da = (model.template()[capsule_vertex(joint, ring, a)] - centre).dot(&back);
            let db = (model.template()[capsule_vertex(joint, ring, b)] - centre).dot(&back);
            db.total_cmp(&da)
        });
        out.extend(ks[..2].iter().map(|&k| capsule_vertex(joint, ring, k)));
    }
    out
}

/// Keypoint weights `w_j`: face and foot keypoints 0.5, the rest 1.
pub fn keypoint_weights() -> Vec<f64> {
    (0..KEYPOINT_COUNT)
        .map(|k| if k == 0 || k >= 15 { 0.5 } else { 1.0 })
        .collect()
}
