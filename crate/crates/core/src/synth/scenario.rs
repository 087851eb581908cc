//! End-to-end synthetic captures: subject, body-worn sensors, hand-held
//! camera and the calibration recordings that precede a capture.
//!
//! Ground truth lives in the studio world `W`; camera observations are
//! expressed in the device's own frame `D`, which differs from `W` by an
//! unknown yaw and translation (both frames are gravity aligned).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{follow_camera, simulate_camera_with, Camera, CaptureFrame};
use super::em::{offset_pose, perturb_pose, relative_to, simulate_em, simulate_tag_track, world_sensor_poses, SensorFrameSet};
use super::motion::{generate_motion, MotionStyle};
use super::noise::{random_rotation, rotation_noise, NoiseSpec};
use crate::body::toy::{self, build_toy_humanoid};
use crate::body::{BodyModel, PoseParams, SensorAnchor};
use crate::calib::SourceTracks;
use crate::error::{Error, Result};
use crate::geom::{invert_offset, RigidTransform, Rotation, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub style: MotionStyle,
    pub duration: f64,
    pub fps: u32,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Seed of the toy body's proportions.
    pub model_seed: u64,
    /// Half-range of the subject's uniformly drawn shape coefficients.
    pub beta_range: f64,
    pub camera_distance: f64,
    pub depth_samples: usize,
    pub source_calibration_frames: usize,
    pub source_calibration_sensors: usize,
    pub skin_calibration_duration: f64,
    /// Odometric drift of the device trajectory, as a fraction of the
    /// subject's path length.
    pub device_drift: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            style: MotionStyle::WalkCircle,
            duration: 10.0,
            fps: 30,
            noise: NoiseSpec::default(),
            seed: 0,
            model_seed: 0,
            beta_range: 1.0,
            camera_distance: 2.5,
            depth_samples: super::camera::DEFAULT_DEPTH_SAMPLES,
            source_calibration_frames: 450,
            source_calibration_sensors: 5,
            skin_calibration_duration: 3.0,
            device_drift: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.duration > 0.0) || self.fps == 0 {
            return Err(Error::invalid("duration and fps must be positive"));
        }
        if !(self.beta_range >= 0.0) || !(self.camera_distance > 0.0) {
            return Err(Error::invalid("beta_range must be ≥ 0 and camera_distance > 0"));
        }
        if self.source_calibration_sensors < 2 || self.source_calibration_frames < 30 {
            return Err(Error::invalid("source calibration needs ≥ 2 sensors and ≥ 30 frames"));
        }
        if !(self.skin_calibration_duration > 0.0) || !self.device_drift.is_finite() {
            return Err(Error::invalid("skin calibration duration must be positive and drift finite"));
        }
        Ok(())
    }
}

/// The subject's registered calibration recording: registered poses, raw
/// EM readings and the tracked tag on the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinCalibrationData {
    pub beta: Vec<f64>,
    pub poses: Vec<PoseParams>,
    pub em: SensorFrameSet,
    pub source_tag: Vec<RigidTransform>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCapture {
    pub config: ScenarioConfig,
    pub model: BodyModel,
    pub beta: Vec<f64>,
    /// Anchors carrying the planted skin-to-sensor offsets.
    pub anchors: Vec<SensorAnchor>,
    pub source_anchor: SensorAnchor,
    /// Planted offsets: index 0 is source tag → source origin, then one per
    /// calibration sensor.
    pub source_offsets: Vec<RigidTransform>,
    pub source_calibration: SourceTracks,
    pub skin_calibration: SkinCalibrationData,
    /// Ground-truth poses in `W`.
    pub gt_poses: Vec<PoseParams>,
    pub em: SensorFrameSet,
    /// Camera observations in `D`.
    pub frames: Vec<CaptureFrame>,
    /// Self-localised camera poses (camera → `D`).
    pub device_track: Vec<RigidTransform>,
    /// Tag on the phone, tracked in `W`.
    pub device_tag: Vec<RigidTransform>,
    pub device_tag_offset: RigidTransform,
    pub world_to_device: RigidTransform,
}

/// A smooth random 6-DoF track around `centre`.
pub fn random_track(rng: &mut ChaCha8Rng, frames: usize, fps: u32, centre: &Vec3, pos_amp: f64, rot_amp: f64) -> Vec<RigidTransform> {
    let base = random_rotation(rng);
    let waves: Vec<(f64, f64, f64)> = (0..12)
        .map(|_| (rng.random_range(0.5..1.0), rng.random_range(0.1..0.5), rng.random_range(0.0..TAU)))
        .collect();
    (0..frames)
        .map(|k| {
            let t = k as f64 / fps as f64;
            let c = |i: usize| {
                let (a, f, p) = waves[i];
                a * (TAU * f * t + p).sin()
            };
            let pos = centre + Vec3::new(c(0), c(1), c(2)) * pos_amp;
            let aa = Vec3::new(c(3) + c(6), c(4) + c(7), c(5) + c(8)) * rot_amp;
            RigidTransform::new(Rotation::from_axis_angle(&aa) * base, pos)
        })
        .collect()
}

/// A random rigid offset with translation norm ≤ `max_t`.
fn random_offset(rng: &mut ChaCha8Rng, max_t: f64, max_angle: f64) -> RigidTransform {
    let dir = super::noise::random_axis(rng);
    let angle = rng.random_range(0.0..max_angle);
    RigidTransform::new(
        Rotation::from_axis_angle(&(super::noise::random_axis(rng) * angle)),
        dir * rng.random_range(0.2 * max_t..max_t),
    )
}

/// The Apriltag-based EM-to-world calibration recording: `S` sensors with
/// tags moved around a tagged source.
pub fn simulate_source_calibration(
    offsets: &[RigidTransform],
    frames: usize,
    fps: u32,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SourceTracks> {
    noise.validate()?;
    if offsets.len() < 2 {
        return Err(Error::invalid("need the source offset and at least one sensor offset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = Vec3::new(0.0, 1.0, 0.0);
    let source_tag_true = random_track(&mut rng, frames, fps, &centre, 0.2, 0.5);
    let origin: Vec<RigidTransform> = source_tag_true.iter().map(|q| offset_pose(q, &offsets[0])).collect();
    let mut em_local = Vec::with_capacity(offsets.len() - 1);
    let mut tags = vec![Vec::new(); offsets.len()];
    for (s, off) in offsets.iter().enumerate().skip(1) {
        let sensor_world = random_track(&mut rng, frames, fps, &centre, 0.4, 1.2);
        let mut local = Vec::with_capacity(frames);
        for (o, w) in origin.iter().zip(&sensor_world) {
            local.push(perturb_pose(&mut rng, &relative_to(o, w), noise.em_pos_sigma, noise.em_rot_sigma));
        }
        em_local.push(local);
        tags[s] = simulate_tag_track(&sensor_world, off, noise, rng.random())?;
    }
    tags[0] = simulate_tag_track(&source_tag_true, &RigidTransform::identity(), noise, rng.random())?;
    Ok(SourceTracks { em_local, tags })
}

/// The subject's short calibration recording. The source tag track is
/// derived from the source's true pose through the inverse tag offset.
#[allow(clippy::too_many_arguments)]
pub fn simulate_skin_calibration(
    model: &BodyModel,
    poses: &[PoseParams],
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
    source_tag_offset: &RigidTransform,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SkinCalibrationData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let em = simulate_em(model, poses, anchors, source, noise, rng.random())?;
    let (ti, ri) = invert_offset(&source_tag_offset.translation, &source_tag_offset.rotation);
    let inv = RigidTransform::new(ri, ti);
    let source_world = poses
        .iter()
        .map(|p| Ok(*world_sensor_poses(model, p, &[], source)?.last().expect("source pose")))
        .collect::<Result<Vec<_>>>()?;
    let tag_true: Vec<RigidTransform> = source_world.iter().map(|s| offset_pose(s, &inv)).collect();
    let source_tag = simulate_tag_track(&tag_true, &RigidTransform::identity(), noise, rng.random())?;
    Ok(SkinCalibrationData {
        beta: poses.first().map(|p| p.beta.clone()).unwrap_or_default(),
        poses: poses.to_vec(),
        em,
        source_tag,
    })
}

/// Builds a full synthetic capture from `cfg`.
pub fn simulate_capture(cfg: &ScenarioConfig) -> Result<SyntheticCapture> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = build_toy_humanoid(cfg.model_seed)?;
    let beta: Vec<f64> = (0..model.shape_count())
        .map(|_| rng.random_range(-1.0..=1.0) * cfg.beta_range)
        .collect();

    // Skin-to-sensor offsets: a few millimetres of padding along the
    // normal, a small in-plane shift and a moderate rotation.
    let offset = |rng: &mut ChaCha8Rng| {
        let v = Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(0.005..0.015));
        let q = rotation_noise(rng, 0.35);
        (q, v)
    };
    let anchors: Vec<SensorAnchor> = toy::sensor_anchors(&model)?
        .into_iter()
        .map(|a| {
            let (q, v) = offset(&mut rng);
            a.with_offset(q, v)
        })
        .collect();
    let (q, v) = offset(&mut rng);
    let source_anchor = toy::source_anchor(&model)?.with_offset(q, v);

    let mut source_offsets = vec![random_offset(&mut rng, 0.05, 1.0)];
    for _ in 0..cfg.source_calibration_sensors {
        source_offsets.push(random_offset(&mut rng, 0.05, 1.0));
    }
    let source_calibration = simulate_source_calibration(
        &source_offsets,
        cfg.source_calibration_frames,
        cfg.fps,
        &cfg.noise,
        rng.random(),
    )?;

    let skin_poses: Vec<PoseParams> =
        generate_motion(&model, cfg.skin_calibration_duration, cfg.fps, MotionStyle::RangeOfMotion, rng.random())?
            .into_iter()
            .map(|p| p.with_beta(&beta))
            .collect();
    let skin_calibration = simulate_skin_calibration(
        &model,
        &skin_poses,
        &anchors,
        &source_anchor,
        &source_offsets[0],
        &cfg.noise,
        rng.random(),
    )?;

    let gt_poses: Vec<PoseParams> = generate_motion(&model, cfg.duration, cfg.fps, cfg.style, rng.random())?
        .into_iter()
        .map(|p| p.with_beta(&beta))
        .collect();
    let em = simulate_em(&model, &gt_poses, &anchors, &source_anchor, &cfg.noise, rng.random())?;

    let extrinsics_w = follow_camera(&model, &gt_poses, cfg.fps, cfg.camera_distance, rng.random())?;
    let frames_w = simulate_camera_with(
        &model,
        &gt_poses,
        &extrinsics_w,
        &Camera::default(),
        cfg.fps,
        &cfg.noise,
        cfg.depth_samples,
        rng.random(),
    )?;
    let world_to_device = RigidTransform::new(
        Rotation::about_y(rng.random_range(0.0..TAU)),
        Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0)),
    );
    let mut frames: Vec<CaptureFrame> = frames_w.iter().map(|f| f.reexpressed(&world_to_device)).collect();
    if cfg.device_drift != 0.0 {
        apply_device_drift(&model, &gt_poses, &mut frames, cfg.device_drift, &world_to_device)?;
    }
    let device_track: Vec<RigidTransform> = frames.iter().map(|f| f.camera_pose()).collect();

    let device_tag_offset = random_offset(&mut rng, 0.06, 1.0);
    let cam_w: Vec<RigidTransform> = extrinsics_w.iter().map(|e| e.inverse()).collect();
    let device_tag = simulate_tag_track(&cam_w, &device_tag_offset, &cfg.noise, rng.random())?;

    Ok(SyntheticCapture {
        config: cfg.clone(),
        model,
        beta,
        anchors,
        source_anchor,
        source_offsets,
        source_calibration,
        skin_calibration,
        gt_poses,
        em,
        frames,
        device_track,
        device_tag,
        device_tag_offset,
        world_to_device,
    })
}

/// Shifts the device's reported poses (and the point clouds it
/// back-projects) by drift proportional to the subject's path length so
/// far, along the device frame's `+x`.
fn apply_device_drift(
    model: &BodyModel,
    poses: &[PoseParams],
    frames: &mut [CaptureFrame],
    fraction: f64,
    world_to_device: &RigidTransform,
) -> Result<()> {
    let roots: Vec<Vec3> = poses
        .iter()
        .map(|p| Ok(model.forward_kinematics(p)?.0[0]))
        .collect::<Result<_>>()?;
    let dir = world_to_device.rotation.transpose().rotate(&Vec3::x());
    let drifted = super::motion::inject_drift(&roots, fraction, &dir);
    for (k, f) in frames.iter_mut().enumerate() {
        let d = world_to_device.rotation.rotate(&(drifted[k] - roots[k]));
        *f = f.reexpressed(&RigidTransform::from_translation(d));
    }
    Ok(())
}
