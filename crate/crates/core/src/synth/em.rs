//! EM sensor streams and fiducial-tag tracks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{position_noise, rotation_noise, NoiseSpec};
use crate::body::{anchor_frame, sensor::apply_anchor_offset, BodyModel, PoseParams, SensorAnchor};
use crate::error::{Error, Result};
use crate::geom::{apply_offset, RigidTransform, Rotation, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: usize,
    #[serde(rename = "p")]
    pub position: Vec3,
    #[serde(rename = "R")]
    pub rotation: Rotation,
}

/// Per-frame EM readings, each expressed relative to the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrameSet {
    pub source_id: usize,
    pub sensor_ids: Vec<usize>,
    pub frames: Vec<Vec<SensorReading>>,
}

impl SensorFrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reading(&self, frame: usize, sensor_id: usize) -> Option<&SensorReading> {
        self.frames[frame].iter().find(|r| r.sensor_id == sensor_id)
    }

    pub fn validate(&self) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            for r in f {
                if !self.sensor_ids.contains(&r.sensor_id) {
                    return Err(Error::invalid(format!("frame {t}: unknown sensor id {}", r.sensor_id)));
                }
                if r.position.iter().any(|v| !v.is_finite()) || r.rotation.matrix().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("EM reading of sensor {} at frame {t}", r.sensor_id)));
                }
            }
        }
        Ok(())
    }
}

impl SensorReading {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.position)
    }
}

/// `(R_srcᵀ(p − p_src), R_srcᵀR)`.
pub fn relative_to(source: &RigidTransform, pose: &RigidTransform) -> RigidTransform {
    source.inverse().compose(pose)
}

/// Noise-free world poses of every anchor (and the source, last) for one
/// body pose.
pub fn world_sensor_poses(
    model: &BodyModel,
    pose: &PoseParams,
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
) -> Result<Vec<RigidTransform>> {
    let mesh = model.skin_mesh(pose)?;
    anchors
        .iter()
        .chain(std::iter::once(source))
        .map(|a| {
            a.validate(&mesh)?;
            let frame = anchor_frame(&mesh.vertices, &mesh.faces, a)?;
            let (p, r) = apply_anchor_offset(&frame, a);
            Ok(RigidTransform::new(r, p))
        })
        .collect()
}

/// Linear interpolation of positions, slerp of orientations.
pub fn interpolate_pose(a: &RigidTransform, b: &RigidTransform, w: f64) -> RigidTransform {
    let qa = a.rotation.to_quaternion();
    let qb = b.rotation.to_quaternion();
    let q = qa.try_slerp(&qb, w, 1e-12).unwrap_or(qa);
    RigidTransform::new(Rotation::from_quaternion(&q), a.translation * (1.0 - w) + b.translation * w)
}

/// EM readings for a pose sequence. With a non-zero `time_offset` the
/// stream is resampled at `k + time_offset` by linear/slerp interpolation
/// (clamped at the sequence ends).
pub fn simulate_em(
    model: &BodyModel,
    poses: &[PoseParams],
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SensorFrameSet> {
    noise.validate()?;
    let clean: Vec<Vec<RigidTransform>> = poses
        .iter()
        .map(|pose| {
            let world = world_sensor_poses(model, pose, anchors, source)?;
            let src = world[anchors.len()];
            Ok(world[..anchors.len()].iter().map(|p| relative_to(&src, p)).collect())
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = poses.len();
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let s = (k as f64 + noise.time_offset).clamp(0.0, (n.max(1) - 1) as f64);
        let i0 = (s.floor() as usize).min(n.saturating_sub(1));
        let i1 = (i0 + 1).min(n - 1);
        let w = s - i0 as f64;
        let frame = anchors
            .iter()
            .enumerate()
            .map(|(a, anchor)| {
                let m = if w == 0.0 { clean[i0][a] } else { interpolate_pose(&clean[i0][a], &clean[i1][a], w) };
                let m = perturb_pose(&mut rng, &m, noise.em_pos_sigma, noise.em_rot_sigma);
                SensorReading {
                    sensor_id: anchor.sensor_id,
                    position: m.translation,
                    rotation: m.rotation,
                }
            })
            .collect();
        frames.push(frame);
    }
    Ok(SensorFrameSet {
        source_id: source.sensor_id,
        sensor_ids: anchors.iter().map(|a| a.sensor_id).collect(),
        frames,
    })
}

/// Tag poses `(q^W, U^W)` for a carrier with a rigidly attached tag at
/// offset `(t_o, R_o)`, with tag-tracking noise.
pub fn simulate_tag_track(
    carrier: &[RigidTransform],
    tag_offset: &RigidTransform,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<RigidTransform>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(carrier
        .iter()
        .map(|c| {
            let tag = offset_pose(c, tag_offset);
            perturb_pose(&mut rng, &tag, noise.tag_pos_sigma, noise.tag_rot_sigma)
        })
        .collect())
}

/// [`apply_offset`] on poses: offset `(t_o, R_o)` is stored as
/// `RigidTransform { translation: t_o, rotation: R_o }`.
pub fn offset_pose(pose: &RigidTransform, offset: &RigidTransform) -> RigidTransform {
    let (q, u) = apply_offset(&pose.translation, &pose.rotation, &offset.translation, &offset.rotation);
    RigidTransform::new(u, q)
}

/// Position noise of 3D RMS `pos_sigma` (m) and rotation noise of RMS
/// angle `rot_sigma_deg`, applied in the world frame.
pub fn perturb_pose<R: rand::Rng>(rng: &mut R, pose: &RigidTransform, pos_sigma: f64, rot_sigma_deg: f64) -> RigidTransform {
    RigidTransform::new(
        rotation_noise(rng, rot_sigma_deg.to_radians()) * pose.rotation,
        pose.translation + position_noise(rng, pos_sigma),
    )
}
