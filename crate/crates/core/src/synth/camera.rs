//! Pinhole camera, keypoint detections and depth crops.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::em::perturb_pose;
use super::noise::NoiseSpec;
use crate::body::{BodyModel, PoseParams};
use crate::error::{Error, Result};
use crate::geom::{Mat3, RigidTransform, Rotation, TriangleMesh, Vec3};

/// Depth below which a point counts as behind the camera.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    #[serde(with = "mat3_row_major")]
    pub k: Mat3,
    pub width: u32,
    pub height: u32,
}

impl Default for Camera {
    /// A 1920×1440 portrait-phone-like camera.
    fn default() -> Self {
        Camera::new(1450.0, 1450.0, 960.0, 720.0, 1920, 1440).expect("valid default intrinsics")
    }
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::from_k(k, width, height)
    }

    pub fn from_k(k: Mat3, width: u32, height: u32) -> Result<Self> {
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !upper || !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("intrinsics must be upper-triangular with positive focal lengths and K[2][2] = 1"));
        }
        Ok(Camera { k, width, height })
    }

    /// `K·[R|t]·X` with perspective division; `None` behind the camera.
    pub fn project(&self, extrinsics: &RigidTransform, x: &Vec3) -> Option<Vector2<f64>> {
        self.project_camera(&extrinsics.apply(x))
    }

    /// Projects a point already in camera coordinates.
    pub fn project_camera(&self, xc: &Vec3) -> Option<Vector2<f64>> {
        if xc.z <= MIN_DEPTH {
            return None;
        }
        let h = self.k * xc;
        Some(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Camera-frame ray through pixel `(u, v)` scaled to unit depth.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        let fx = self.k[(0, 0)];
        let fy = self.k[(1, 1)];
        let s = self.k[(0, 1)];
        let cx = self.k[(0, 2)];
        let cy = self.k[(1, 2)];
        let y = (v - cy) / fy;
        let x = (u - cx - s * y) / fx;
        Vec3::new(x, y, 1.0)
    }

    pub fn in_image(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    /// Detector confidence in `[0, 1]`; 0 marks a missing detection.
    pub c: f64,
}

impl Keypoint2D {
    pub fn missing() -> Self {
        Keypoint2D { x: 0.0, y: 0.0, c: 0.0 }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// One camera observation. `extrinsics` maps world to camera coordinates;
/// the point cloud is in world coordinates and `human_crop` indexes into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureFrame {
    pub timestamp: f64,
    pub camera: Camera,
    pub extrinsics: RigidTransform,
    pub keypoints: Vec<Keypoint2D>,
    pub pointcloud: Vec<Vec3>,
    pub human_crop: Vec<usize>,
}

impl CaptureFrame {
    pub fn human_points(&self) -> Vec<Vec3> {
        self.human_crop.iter().map(|&i| self.pointcloud[i]).collect()
    }

    /// Camera pose in the world (camera-to-world).
    pub fn camera_pose(&self) -> RigidTransform {
        self.extrinsics.inverse()
    }

    /// The same observation with world coordinates mapped through `g`.
    pub fn reexpressed(&self, g: &RigidTransform) -> CaptureFrame {
        CaptureFrame {
            timestamp: self.timestamp,
            camera: self.camera,
            extrinsics: self.extrinsics.compose(&g.inverse()),
            keypoints: self.keypoints.clone(),
            pointcloud: self.pointcloud.iter().map(|p| g.apply(p)).collect(),
            human_crop: self.human_crop.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.human_crop.iter().any(|&i| i >= self.pointcloud.len()) {
            return Err(Error::invalid("human crop index outside the point cloud"));
        }
        if self.keypoints.iter().any(|k| !(0.0..=1.0).contains(&k.c) || !k.x.is_finite() || !k.y.is_finite()) {
            return Err(Error::invalid("keypoints need finite positions and confidences in [0, 1]"));
        }
        Ok(())
    }
}

/// Camera-to-world rotation looking along `dir` with image `y` pointing
/// down (world `+y` is up).
pub fn look_rotation(dir: &Vec3) -> Result<Rotation> {
    let z = dir.normalize();
    let x_raw = z.cross(&Vec3::y());
    if x_raw.norm() < 1e-6 {
        return Err(Error::Degenerate("viewing direction parallel to the up axis".into()));
    }
    let x = x_raw.normalize();
    let y = z.cross(&x);
    Ok(Rotation::from_matrix_unchecked(Mat3::from_columns(&[x, y, z])))
}

/// World-to-camera extrinsics for a hand-held camera `distance` ahead of
/// the subject (along its facing direction), looking back at the pelvis,
/// with a slow hand-held sway.
pub fn follow_camera(model: &BodyModel, poses: &[PoseParams], fps: u32, distance: f64, seed: u64) -> Result<Vec<RigidTransform>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let t = k as f64 / fps.max(1) as f64;
            let r = Rotation::from_axis_angle(&pose.theta_r);
            let fwd = r.rotate(&Vec3::z());
            let fwd = Vec3::new(fwd.x, 0.0, fwd.z).normalize();
            let pelvis = model.forward_kinematics(pose)?.0[0];
            let wob = |i: usize, f: f64| (std::f64::consts::TAU * f * t + phases[i]).sin();
            let eye = pelvis
                + fwd * distance
                + Vec3::new(0.0, 0.25, 0.0)
                + Vec3::new(0.08 * wob(0, 0.21), 0.05 * wob(1, 0.33), 0.08 * wob(2, 0.17));
            let target = pelvis + Vec3::new(0.1 * wob(3, 0.13), 0.1 * wob(4, 0.19), 0.1 * wob(5, 0.23));
            let rot = look_rotation(&(target - eye))?;
            Ok(RigidTransform::new(rot, eye).inverse())
        })
        .collect()
}

/// Number of surface samples per frame in the synthetic depth crop.
pub const DEFAULT_DEPTH_SAMPLES: usize = 400;

/// Synthesises camera observations. `trajectory` holds the true
/// world-to-camera extrinsics; the frames carry the noisy ones.
pub fn simulate_camera(
    model: &BodyModel,
    poses: &[PoseParams],
    trajectory: &[RigidTransform],
    camera: &Camera,
    fps: u32,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<CaptureFrame>> {
    simulate_camera_with(model, poses, trajectory, camera, fps, noise, DEFAULT_DEPTH_SAMPLES, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_camera_with(
    model: &BodyModel,
    poses: &[PoseParams],
    trajectory: &[RigidTransform],
    camera: &Camera,
    fps: u32,
    noise: &NoiseSpec,
    depth_samples: usize,
    seed: u64,
) -> Result<Vec<CaptureFrame>> {
    noise.validate()?;
    if trajectory.len() != poses.len() {
        return Err(Error::DimensionMismatch {
            what: "camera trajectory",
            expected: poses.len(),
            got: trajectory.len(),
        });
    }
    if fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(poses.len());
    for (k, (pose, extr)) in poses.iter().zip(trajectory).enumerate() {
        let mesh = model.skin_mesh(pose)?;
        let kps3 = model.regress_keypoints(&mesh)?;
        let keypoints = kps3
            .iter()
            .map(|x| detect_keypoint(&mut rng, camera, extr, x, noise))
            .collect();

        let cam_pose = extr.inverse();
        let reported = perturb_pose(&mut rng, &cam_pose, noise.camera_pos_sigma, noise.camera_rot_sigma);
        let samples = sample_visible_surface(&mut rng, &mesh, &cam_pose.translation, depth_samples);
        let pointcloud: Vec<Vec3> = samples
            .iter()
            .map(|p| {
                let xc = extr.apply(p);
                let depth_noise = noise.depth_sigma * rng.sample::<f64, _>(StandardNormal);
                let xc = xc * ((xc.z + depth_noise) / xc.z);
                reported.apply(&xc)
            })
            .collect();
        let human_crop = (0..pointcloud.len()).collect();
        frames.push(CaptureFrame {
            timestamp: k as f64 / fps as f64,
            camera: *camera,
            extrinsics: reported.inverse(),
            keypoints,
            pointcloud,
            human_crop,
        });
    }
    Ok(frames)
}

fn detect_keypoint<R: Rng>(rng: &mut R, camera: &Camera, extr: &RigidTransform, x: &Vec3, noise: &NoiseSpec) -> Keypoint2D {
    let Some(p) = camera.project(extr, x) else {
        return Keypoint2D::missing();
    };
    let noisy = noise != &NoiseSpec::zero();
    // Draw every random number unconditionally so streams stay aligned.
    let dropout = rng.random::<f64>() < noise.kp_dropout_prob;
    let outlier = rng.random::<f64>() < noise.kp_outlier_prob;
    let jitter = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        * (noise.kp_pixel_sigma / std::f64::consts::SQRT_2);
    let conf_draw: f64 = rng.random_range(0.6..1.0);
    let low_conf: f64 = rng.random_range(0.0..0.3);
    let random_px = Vector2::new(
        rng.random_range(0.0..camera.width as f64),
        rng.random_range(0.0..camera.height as f64),
    );
    if dropout {
        return Keypoint2D {
            x: p.x,
            y: p.y,
            c: low_conf,
        };
    }
    let pos = if outlier { random_px } else { p + jitter };
    Keypoint2D {
        x: pos.x,
        y: pos.y,
        c: if noisy { conf_draw } else { 1.0 },
    }
}

/// Area-weighted samples on faces whose normal faces `eye`.
fn sample_visible_surface<R: Rng>(rng: &mut R, mesh: &TriangleMesh, eye: &Vec3, count: usize) -> Vec<Vec3> {
    let mut faces = Vec::new();
    let mut cumulative = Vec::new();
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.corners(f);
        let n = (b - a).cross(&(c - a));
        let centre = (a + b + c) / 3.0;
        if n.dot(&(centre - eye)) < 0.0 {
            total += 0.5 * n.norm();
            faces.push(f);
            cumulative.push(total);
        }
    }
    if faces.is_empty() || count == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let i = cumulative.partition_point(|&c| c < r).min(faces.len() - 1);
            let [a, b, c] = mesh.corners(faces[i]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect()
}

mod mat3_row_major {
    use crate::geom::Mat3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let a: [f64; 9] = std::array::from_fn(|i| m[(i / 3, i % 3)]);
        a.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let a = <[f64; 9]>::deserialize(d)?;
        Ok(Mat3::from_row_slice(&a))
    }
}
