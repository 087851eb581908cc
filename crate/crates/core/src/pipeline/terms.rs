//! Energy terms of the fit, each with its gradient with respect to the flat
//! pose vector `[θ_r, θ_b, t]`.

use serde::{Deserialize, Serialize};

use crate::body::{anchor_frame, sensor::apply_anchor_offset, virtual_sensor_backward, BodyModel, PoseParams, SensorAnchor, ShapedBody};
use crate::error::{Error, Result};
use crate::geom::{geman_mcclure_sq, Mat3, MeshBvh, Rotation, TriangleMesh, Vec3};
use crate::synth::{CaptureFrame, SensorReading};

/// Value of a term, its flat-pose gradient, and how many of its summands
/// were skipped (missing sensors, keypoints behind the camera).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub skipped: usize,
}

/// Vertex-gradient accumulator: `scale · dE/dv` is added to `grad`.
pub(crate) type VertexGrad<'a> = Option<(&'a mut [Vec3], f64)>;

fn posed(model: &BodyModel, pose: &PoseParams) -> Result<(ShapedBody, crate::body::PoseState)> {
    pose.check(model)?;
    let shaped = ShapedBody::new(model, &pose.beta)?;
    let state = model.pose_state(&shaped, pose, true)?;
    Ok((shaped, state))
}

fn finish(model: &BodyModel, pose: &PoseParams, term: impl FnOnce(&[Vec3], &mut [Vec3]) -> Result<(f64, usize)>) -> Result<TermValue> {
    let (shaped, state) = posed(model, pose)?;
    let mut gv = vec![Vec3::zeros(); model.vertex_count()];
    let (value, skipped) = term(&state.vertices, &mut gv)?;
    let g = model.backward(&shaped, pose, &state, &gv, &[], false);
    Ok(TermValue {
        value,
        gradient: g.to_flat(),
        skipped,
    })
}

/// `Σ_s λ_p‖p_s − p_s^v‖² + λ_r‖R_s − R_s^v‖²_F` with virtual sensors
/// expressed relative to the virtual source, as the EM readings are.
/// Anchors without a reading at this frame are skipped.
pub fn e_rec(
    model: &BodyModel,
    pose: &PoseParams,
    measurements: &[SensorReading],
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
    lambda_p: f64,
    lambda_r: f64,
) -> Result<TermValue> {
    finish(model, pose, |v, gv| {
        rec_into(v, model.faces(), measurements, anchors, source, lambda_p, lambda_r, None, Some((gv, 1.0)))
    })
}

/// Robustified reprojection error over keypoints with confidence ≥ `tau`.
pub fn e_2d(model: &BodyModel, pose: &PoseParams, frame: &CaptureFrame, tau: f64, sigma: f64) -> Result<TermValue> {
    check_2d(tau, sigma)?;
    finish(model, pose, |v, gv| two_d_into(model, v, frame, tau, sigma, Some((gv, 1.0))))
}

/// `‖θ_b^S1 − θ_b‖²`.
pub fn e_prior(pose: &PoseParams, pose_s1: &PoseParams) -> Result<TermValue> {
    if pose.theta_b.len() != pose_s1.theta_b.len() {
        return Err(Error::DimensionMismatch {
            what: "body pose joints",
            expected: pose_s1.theta_b.len(),
            got: pose.theta_b.len(),
        });
    }
    let mut gradient = vec![0.0; PoseParams::flat_len(pose.theta_b.len() + 1)];
    let value = prior_into(pose, pose_s1, Some((&mut gradient, 1.0)));
    Ok(TermValue {
        value,
        gradient,
        skipped: 0,
    })
}

/// Mean squared distance from the human points to the posed surface.
pub fn e_pcl(model: &BodyModel, pose: &PoseParams, points: &[Vec3]) -> Result<TermValue> {
    finish(model, pose, |v, gv| Ok((pcl_into(v, model.faces(), points, Some((gv, 1.0)))?, 0)))
}

pub(crate) fn check_2d(tau: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) || !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "keypoint threshold must lie in [0, 1] and the robust scale be positive (got τ = {tau}, σ = {sigma})"
        )));
    }
    Ok(())
}

/// Vertex-level E_rec. `gauge`, when set, adds `λ_p‖p_src‖² + λ_r‖R_src − I‖²_F`
/// tying the virtual source to the origin.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rec_into(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    measurements: &[SensorReading],
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
    lambda_p: f64,
    lambda_r: f64,
    gauge: Option<(f64, f64)>,
    mut grad: VertexGrad<'_>,
) -> Result<(f64, usize)> {
    let src_frame = anchor_frame(vertices, faces, source)?;
    let (p_src, r_src) = apply_anchor_offset(&src_frame, source);
    let rs = *r_src.matrix();
    let mut g_psrc = Vec3::zeros();
    let mut g_rsrc = Mat3::zeros();
    let mut value = 0.0;
    let mut skipped = 0;
    for anchor in anchors {
        let Some(m) = measurements.iter().find(|r| r.sensor_id == anchor.sensor_id) else {
            skipped += 1;
            continue;
        };
        let frame = anchor_frame(vertices, faces, anchor)?;
        let (p, r) = apply_anchor_offset(&frame, anchor);
        let d = p - p_src;
        let p_rel = rs.transpose() * d;
        let r_rel = rs.transpose() * r.matrix();
        let ep = p_rel - m.position;
        let er = r_rel - m.rotation.matrix();
        value += lambda_p * ep.norm_squared() + lambda_r * er.norm_squared();
        if let Some((gv, scale)) = grad.as_mut() {
            let gp = ep * (2.0 * lambda_p * *scale);
            let gr = er * (2.0 * lambda_r * *scale);
            // p_rel = R_srcᵀ d, R_rel = R_srcᵀ R.
            let gd = rs * gp;
            g_psrc -= gd;
            g_rsrc += d * gp.transpose() + r.matrix() * gr.transpose();
            virtual_sensor_backward(vertices, faces, anchor, &frame, &gd, &(rs * gr), gv);
        }
    }
    if let Some((wp, wr)) = gauge {
        let er = rs - Mat3::identity();
        value += wp * p_src.norm_squared() + wr * er.norm_squared();
        if let Some((_, scale)) = grad.as_ref() {
            g_psrc += p_src * (2.0 * wp * scale);
            g_rsrc += er * (2.0 * wr * scale);
        }
    }
    if let Some((gv, _)) = grad {
        virtual_sensor_backward(vertices, faces, source, &src_frame, &g_psrc, &g_rsrc, gv);
    }
    Ok((value, skipped))
}

/// Virtual source pose for a posed mesh.
pub(crate) fn virtual_source(vertices: &[Vec3], faces: &[[usize; 3]], source: &SensorAnchor) -> Result<(Vec3, Rotation)> {
    let f = anchor_frame(vertices, faces, source)?;
    Ok(apply_anchor_offset(&f, source))
}

/// Vertex-level E_2D; returns the value and the number of confident
/// keypoints excluded for lying behind the camera.
pub(crate) fn two_d_into(
    model: &BodyModel,
    vertices: &[Vec3],
    frame: &CaptureFrame,
    tau: f64,
    sigma: f64,
    grad: VertexGrad<'_>,
) -> Result<(f64, usize)> {
    let kps = model.regress_keypoints_from(vertices)?;
    if frame.keypoints.len() != kps.len() {
        return Err(Error::DimensionMismatch {
            what: "frame keypoints",
            expected: kps.len(),
            got: frame.keypoints.len(),
        });
    }
    let k = &frame.camera.k;
    let rc = frame.extrinsics.rotation.matrix();
    let want = grad.is_some();
    let mut gk = vec![Vec3::zeros(); if want { kps.len() } else { 0 }];
    let mut value = 0.0;
    let mut behind = 0;
    for (i, (x, det)) in kps.iter().zip(&frame.keypoints).enumerate() {
        if det.c < tau || det.c <= 0.0 {
            continue;
        }
        let xc = frame.extrinsics.apply(x);
        if xc.z <= 1e-6 {
            behind += 1;
            continue;
        }
        let h = k * xc;
        let u = Vec3::new(h.x / h.z, h.y / h.z, 0.0);
        let r = Vec3::new(u.x - det.x, u.y - det.y, 0.0);
        let (rho, drho) = geman_mcclure_sq(r.norm_squared(), sigma);
        value += rho;
        if want {
            let gu = r * (2.0 * drho);
            let gh = Vec3::new(gu.x / h.z, gu.y / h.z, -(gu.x * h.x + gu.y * h.y) / (h.z * h.z));
            gk[i] = rc.transpose() * (k.transpose() * gh);
        }
    }
    if behind > 0 {
        log::warn!("{behind} confident keypoints behind the camera at t = {:.3}", frame.timestamp);
    }
    if let Some((gv, scale)) = grad {
        for g in &mut gk {
            *g *= scale;
        }
        model.keypoint_backward(&gk, gv);
    }
    Ok((value, behind))
}

/// Flat-gradient E_prior over the body-pose block.
pub(crate) fn prior_into(pose: &PoseParams, s1: &PoseParams, grad: Option<(&mut [f64], f64)>) -> f64 {
    let mut value = 0.0;
    let mut grad = grad;
    for (i, (a, b)) in pose.theta_b.iter().zip(&s1.theta_b).enumerate() {
        let d = a - b;
        value += d.norm_squared();
        if let Some((g, scale)) = grad.as_mut() {
            for k in 0..3 {
                g[3 + 3 * i + k] += 2.0 * *scale * d[k];
            }
        }
    }
    value
}

/// Vertex-level E_pcl with closest features frozen for the gradient.
pub(crate) fn pcl_into(vertices: &[Vec3], faces: &[[usize; 3]], points: &[Vec3], grad: VertexGrad<'_>) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mesh = TriangleMesh {
        vertices: vertices.to_vec(),
        faces: faces.to_vec(),
        normals: None,
    };
    let bvh = MeshBvh::build(&mesh)?;
    let n = points.len() as f64;
    let mut value = 0.0;
    let mut grad = grad;
    for p in points {
        let hit = bvh.closest_point(p);
        value += hit.sq_distance;
        if let Some((gv, scale)) = grad.as_mut() {
            let base = (p - hit.point) * (-2.0 * *scale / n);
            let f = faces[hit.face];
            for k in 0..3 {
                gv[f[k]] += base * hit.barycentric[k];
            }
        }
    }
    Ok(value / n)
}
