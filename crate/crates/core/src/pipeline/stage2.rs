use serde::{Deserialize, Serialize};

use super::terms::{pcl_into, prior_into, rec_into, two_d_into};
use super::{SequenceInput, Stage2Config};
use crate::body::{layout, BodyModel, PoseGroups, PoseParams, ShapedBody};
use crate::error::{Error, Result};
use crate::geom::{Rotation, Vec3};
use crate::optim::{adam_minimize, AdamConfig, Objective, Restricted};
use crate::synth::{CaptureFrame, SensorReading};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2FrameReport {
    /// Objective at the starting pose and at the accepted iterate; zero for
    /// propagated frames.
    pub start: f64,
    pub accepted: f64,
    pub iterations: usize,
    pub keypoints_used: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Output {
    pub poses: Vec<PoseParams>,
    pub frames: Vec<Stage2FrameReport>,
    pub propagated: Vec<usize>,
}

/// `E_S2` of one frame over the full flat pose.
pub(crate) struct FrameObjective<'a> {
    pub model: &'a BodyModel,
    pub shaped: &'a ShapedBody,
    pub template: &'a PoseParams,
    pub frame: &'a CaptureFrame,
    pub points: Vec<Vec3>,
    pub readings: &'a [SensorReading],
    pub input: &'a SequenceInput<'a>,
    pub s1: &'a PoseParams,
    pub cfg: &'a Stage2Config,
}

impl FrameObjective<'_> {
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let c = self.cfg;
        let pose = self.template.from_flat(x);
        let state = self.model.pose_state(self.shaped, &pose, true)?;
        let faces = self.model.faces();
        let want = grad.is_some();
        let nv = self.model.vertex_count();
        let mut gv = vec![Vec3::zeros(); if want { nv } else { 0 }];
        let mut gv_rec = vec![Vec3::zeros(); if want { nv } else { 0 }];

        let mut value = 0.0;
        if c.lambda_2d > 0.0 {
            let (e, _) = two_d_into(self.model, &state.vertices, self.frame, c.tau, c.sigma_gm, acc(&mut gv, c.lambda_2d))?;
            value += c.lambda_2d * e;
        }
        if c.lambda_pcl > 0.0 {
            value += c.lambda_pcl * pcl_into(&state.vertices, faces, &self.points, acc(&mut gv, c.lambda_pcl))?;
        }
        if c.lambda_rec > 0.0 {
            let (e, _) = rec_into(
                &state.vertices,
                faces,
                self.readings,
                self.input.anchors,
                self.input.source_anchor,
                c.lambda_p,
                c.lambda_r,
                None,
                acc(&mut gv_rec, c.lambda_rec),
            )?;
            value += c.lambda_rec * e;
        }
        let Some(grad) = grad else {
            if c.lambda_prior > 0.0 {
                value += c.lambda_prior * prior_into(&pose, self.s1, None);
            }
            return Ok(value);
        };
        grad.fill(0.0);
        if c.lambda_prior > 0.0 {
            value += c.lambda_prior * prior_into(&pose, self.s1, Some((&mut *grad, c.lambda_prior)));
        }
        self.model
            .backward(self.shaped, &pose, &state, &gv, &[], false)
            .add_flat_into(grad, 1.0);
        if c.lambda_rec > 0.0 {
            // The EM term only steers the body pose.
            let mut g = self.model.backward(self.shaped, &pose, &state, &gv_rec, &[], false).to_flat();
            let j = self.model.joint_count();
            for i in layout::root_rotation().chain(layout::translation(j)) {
                g[i] = 0.0;
            }
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok(value)
    }
}

/// Gradient sink, absent when only the value is wanted.
fn acc(g: &mut [Vec3], scale: f64) -> Option<(&mut [Vec3], f64)> {
    (!g.is_empty()).then_some((g, scale))
}

impl Objective for FrameObjective<'_> {
    fn dimension(&self) -> usize {
        PoseParams::flat_len(self.model.joint_count())
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.eval(x, None).unwrap_or(f64::NAN)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad)).unwrap_or(f64::NAN)
    }
}

/// Root orientation of a body standing upright and facing the camera.
fn facing_camera(frame: &CaptureFrame) -> Vec3 {
    // Camera optical axis in the world.
    let forward = frame.extrinsics.rotation.transpose().rotate(&Vec3::z());
    let face = -forward;
    let yaw = face.x.atan2(face.z);
    Rotation::about_y(yaw).to_axis_angle()
}

fn first_frame_init(frame: &CaptureFrame, points: &[Vec3], s1: &PoseParams, root_rest: &Vec3) -> PoseParams {
    let centre = if points.is_empty() {
        // No depth: somewhere in front of the camera.
        let cam = frame.extrinsics.inverse();
        cam.apply(&Vec3::new(0.0, 0.0, 2.5))
    } else {
        points.iter().sum::<Vec3>() / points.len() as f64
    };
    PoseParams {
        theta_r: facing_camera(frame),
        theta_b: s1.theta_b.clone(),
        t: centre - root_rest,
        beta: s1.beta.clone(),
    }
}

/// Sequential per-frame fit in the device world. Each frame starts from the
/// root extrapolated from the previous two frames with the current Stage 1
/// body pose, and keeps the best Adam iterate (never worse than its start).
pub fn stage2(model: &BodyModel, s1: &[PoseParams], input: &SequenceInput<'_>, cfg: &Stage2Config) -> Result<Stage2Output> {
    cfg.validate()?;
    let n = s1.len();
    if input.frames.len() != n || input.em.len() != n {
        return Err(Error::DimensionMismatch {
            what: "stage 2 frames",
            expected: n,
            got: input.frames.len().min(input.em.len()),
        });
    }
    let shaped = ShapedBody::new(model, input.beta)?;
    let template = PoseParams::zero(model).with_beta(input.beta);
    let free = PoseGroups::ALL.indices(model);
    let mut poses: Vec<PoseParams> = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    let mut propagated = Vec::new();
    for t in 0..n {
        let frame = &input.frames[t];
        let points = frame.human_points();
        let keypoints_used = frame
            .keypoints
            .iter()
            .filter(|k| k.c >= cfg.tau && k.c > 0.0)
            .count();
        if keypoints_used == 0 && points.is_empty() {
            if let Some(prev) = poses.last().cloned() {
                propagated.push(t);
                log::warn!("stage 2 frame {t}: no keypoints or depth, pose propagated");
                reports.push(Stage2FrameReport {
                    start: 0.0,
                    accepted: 0.0,
                    iterations: 0,
                    keypoints_used,
                    points: 0,
                });
                poses.push(prev);
                continue;
            }
        }
        let init = match poses.len() {
            0 => first_frame_init(frame, &points, &s1[t], &shaped.joints[0]),
            k => {
                let prev = &poses[k - 1];
                let (theta_r, t_root) = if k >= 2 {
                    // Constant-velocity extrapolation of the root.
                    let pp = &poses[k - 2];
                    let r1 = Rotation::from_axis_angle(&prev.theta_r);
                    let r0 = Rotation::from_axis_angle(&pp.theta_r);
                    ((r1 * r0.transpose() * r1).to_axis_angle(), prev.t * 2.0 - pp.t)
                } else {
                    (prev.theta_r, prev.t)
                };
                PoseParams {
                    theta_r,
                    theta_b: s1[t].theta_b.clone(),
                    t: t_root,
                    beta: prev.beta.clone(),
                }
            }
        };
        let iterations = if poses.is_empty() {
            cfg.first_frame_iterations
        } else {
            cfg.adam.iterations
        };
        let obj = FrameObjective {
            model,
            shaped: &shaped,
            template: &template,
            frame,
            points,
            readings: &input.em.frames[t],
            input,
            s1: &s1[t],
            cfg,
        };
        let restricted = Restricted::new(&obj, init.to_flat(), free.clone());
        let start = restricted.start();
        let adam = AdamConfig {
            iterations,
            ..cfg.adam
        };
        let res = adam_minimize(&restricted, &start, &adam).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("frame {t}: {m}")),
            e => e,
        })?;
        let start_value = restricted.evaluate(&start);
        reports.push(Stage2FrameReport {
            start: start_value,
            accepted: res.f,
            iterations,
            keypoints_used,
            points: obj.points.len(),
        });
        poses.push(template.from_flat(&restricted.embed(&res.x)));
    }
    Ok(Stage2Output {
        poses,
        frames: reports,
        propagated,
    })
}

/// `E_S2` of frame `t` at `pose` given its Stage 1 pose. The gradient written
/// to `grad` is the one Stage 2 descends: the EM term contributes nothing to
/// the root coordinates.
pub fn stage2_frame_energy(
    model: &BodyModel,
    input: &SequenceInput<'_>,
    s1: &PoseParams,
    cfg: &Stage2Config,
    t: usize,
    pose: &PoseParams,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    input.validate(model, true)?;
    if t >= input.len() {
        return Err(Error::invalid(format!("frame {t} out of range for {} frames", input.len())));
    }
    let shaped = ShapedBody::new(model, input.beta)?;
    let template = PoseParams::zero(model).with_beta(input.beta);
    let frame = &input.frames[t];
    let obj = FrameObjective {
        model,
        shaped: &shaped,
        template: &template,
        frame,
        points: frame.human_points(),
        readings: &input.em.frames[t],
        input,
        s1,
        cfg,
    };
    obj.eval(&pose.to_flat(), grad)
}
