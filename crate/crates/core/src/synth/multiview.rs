//! Calibrated multi-camera rig observing a subject, with per-frame
//! surface scans: the input of the reference registration.

use std::f64::consts::TAU;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::camera::{look_rotation, Camera, Keypoint2D};
use crate::body::{toy, BodyModel, PoseParams};
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Rotation, Vec3};
use crate::registration::{MultiViewObservation, View};

/// World-to-camera extrinsics for `per_ring` cameras on each of the given
/// rings `(radius, height)`, all looking at `target`.
pub fn ring_rig(target: &Vec3, per_ring: usize, rings: &[(f64, f64)]) -> Result<Vec<RigidTransform>> {
    if per_ring == 0 || rings.is_empty() {
        return Err(Error::invalid("a rig needs at least one camera"));
    }
    let mut out = Vec::with_capacity(per_ring * rings.len());
    for (r, &(radius, height)) in rings.iter().enumerate() {
        // Stagger alternate rings by half a step.
        let shift = if r % 2 == 1 { 0.5 } else { 0.0 };
        for i in 0..per_ring {
            let a = TAU * (i as f64 + shift) / per_ring as f64;
            let eye = target + Vec3::new(radius * a.sin(), height, radius * a.cos());
            let rot = look_rotation(&(target - eye))?;
            out.push(RigidTransform::new(rot, eye).inverse());
        }
    }
    Ok(out)
}

/// Projects the regressed keypoints of every pose into every camera with
/// isotropic pixel noise of RMS `pixel_sigma`, and attaches the posed mesh
/// as the scan. With `back_tag`, the tag sits at the mean of the toy
/// body's lower-back vertices.
pub fn observe_multiview(
    model: &BodyModel,
    poses: &[PoseParams],
    rig: &[RigidTransform],
    camera: &Camera,
    pixel_sigma: f64,
    back_tag: bool,
    seed: u64,
) -> Result<MultiViewObservation> {
    if !(pixel_sigma >= 0.0) {
        return Err(Error::invalid("pixel noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spine = toy::lower_back_vertices(model);
    let mut views: Vec<View> = rig
        .iter()
        .map(|e| View {
            camera: *camera,
            extrinsics: *e,
            keypoints: Vec::with_capacity(poses.len()),
        })
        .collect();
    let mut scans = Vec::with_capacity(poses.len());
    let mut tags = Vec::new();
    for pose in poses {
        let mesh = model.skin_mesh(pose)?;
        let kps = model.regress_keypoints(&mesh)?;
        for view in &mut views {
            let dets = kps
                .iter()
                .map(|x| {
                    let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                        * (pixel_sigma / std::f64::consts::SQRT_2);
                    match view.camera.project(&view.extrinsics, x) {
                        Some(p) => {
                            let p = p + noise;
                            Keypoint2D { x: p.x, y: p.y, c: 1.0 }
                        }
                        None => Keypoint2D::missing(),
                    }
                })
                .collect();
            view.keypoints.push(dets);
        }
        if back_tag {
            let q = spine.iter().map(|&v| mesh.vertices[v]).sum::<Vec3>() / spine.len() as f64;
            tags.push(Some(RigidTransform::new(Rotation::identity(), q)));
        }
        scans.push(mesh);
    }
    Ok(MultiViewObservation {
        views,
        scans,
        back_tags: tags,
    })
}
