//! Forward kinematics, linear blend skinning and their reverse-mode
//! derivatives.

use super::model::BodyModel;
use super::pose::PoseParams;
use crate::error::{Error, Result};
use crate::geom::{exp_vjp, Mat3, Rotation, TriangleMesh, Vec3};

/// Template deformed by shape coefficients, with its rest joint locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedBody {
    pub beta: Vec<f64>,
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
}

impl ShapedBody {
    pub fn new(model: &BodyModel, beta: &[f64]) -> Result<Self> {
        if beta.len() != model.shape_count() {
            return Err(Error::DimensionMismatch {
                what: "shape coefficients",
                expected: model.shape_count(),
                got: beta.len(),
            });
        }
        let vertices: Vec<Vec3> = model
            .template()
            .iter()
            .enumerate()
            .map(|(v, p)| {
                model
                    .shape_dirs_of(v)
                    .iter()
                    .zip(beta)
                    .fold(*p, |acc, (d, b)| acc + d * *b)
            })
            .collect();
        let joints = regress(model.joint_regressor(), &vertices);
        Ok(ShapedBody {
            beta: beta.to_vec(),
            vertices,
            joints,
        })
    }
}

fn regress(rows: &[super::model::SparseRow], vertices: &[Vec3]) -> Vec<Vec3> {
    rows.iter()
        .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(v, w)| acc + vertices[v] * w))
        .collect()
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct PoseState {
    pub local: Vec<Rotation>,
    pub global: Vec<Rotation>,
    /// Posed joint positions X_j.
    pub joints: Vec<Vec3>,
    /// Posed vertices; empty when evaluated with `skin = false`.
    pub vertices: Vec<Vec3>,
}

/// Gradient of a scalar with respect to the pose parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradient {
    /// Index 0 is θ_r, index j is θ_b[j-1].
    pub rotations: Vec<Vec3>,
    pub t: Vec3,
    /// Present when requested.
    pub beta: Option<Vec<f64>>,
}

impl PoseGradient {
    pub fn zeros(joints: usize) -> Self {
        PoseGradient {
            rotations: vec![Vec3::zeros(); joints],
            t: Vec3::zeros(),
            beta: None,
        }
    }

    /// Same layout as [`PoseParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.rotations.len() + 3);
        for r in &self.rotations {
            out.extend_from_slice(r.as_slice());
        }
        out.extend_from_slice(self.t.as_slice());
        out
    }

    pub fn add_flat_into(&self, out: &mut [f64], scale: f64) {
        for (j, r) in self.rotations.iter().enumerate() {
            for k in 0..3 {
                out[3 * j + k] += scale * r[k];
            }
        }
        let n = 3 * self.rotations.len();
        for k in 0..3 {
            out[n + k] += scale * self.t[k];
        }
    }
}

impl BodyModel {
    /// Evaluates kinematics (and skinning when `skin` is set) for a pose
    /// whose shape is already baked into `shaped`.
    pub fn pose_state(&self, shaped: &ShapedBody, pose: &PoseParams, skin: bool) -> Result<PoseState> {
        if pose.theta_b.len() + 1 != self.joint_count() {
            return Err(Error::DimensionMismatch {
                what: "body pose joints",
                expected: self.joint_count() - 1,
                got: pose.theta_b.len(),
            });
        }
        let nj = self.joint_count();
        let mut local = Vec::with_capacity(nj);
        let mut global: Vec<Rotation> = Vec::with_capacity(nj);
        // δ_j = a_j − J_j, kept explicitly so the rest pose reproduces the
        // template bit for bit.
        let mut delta: Vec<Vec3> = Vec::with_capacity(nj);
        for j in 0..nj {
            let r = Rotation::from_axis_angle(&pose.joint_axis_angle(j));
            local.push(r);
            match self.parent(j) {
                None => {
                    global.push(r);
                    delta.push(Vec3::zeros());
                }
                Some(p) => {
                    global.push(global[p] * r);
                    let bone = shaped.joints[j] - shaped.joints[p];
                    delta.push(delta[p] + (global[p].matrix() - Mat3::identity()) * bone);
                }
            }
        }
        let offsets: Vec<Vec3> = delta.iter().map(|d| d + pose.t).collect();
        let joints: Vec<Vec3> = shaped.joints.iter().zip(&offsets).map(|(j, o)| j + o).collect();
        let vertices = if skin {
            self.skin_vertices(shaped, &global, &offsets)
        } else {
            Vec::new()
        };
        Ok(PoseState {
            local,
            global,
            joints,
            vertices,
        })
    }

    fn skin_vertices(&self, shaped: &ShapedBody, global: &[Rotation], offsets: &[Vec3]) -> Vec<Vec3> {
        self.skinning()
            .iter()
            .zip(&shaped.vertices)
            .map(|(row, rest)| skin_one(row, rest, &shaped.joints, global, offsets))
            .collect()
    }

    /// Posed position of a single vertex.
    pub fn skin_vertex(&self, shaped: &ShapedBody, state: &PoseState, v: usize) -> Vec3 {
        let offsets: Vec<Vec3> = state.joints.iter().zip(&shaped.joints).map(|(x, j)| x - j).collect();
        skin_one(&self.skinning()[v], &shaped.vertices[v], &shaped.joints, &state.global, &offsets)
    }

    /// Reverse-mode derivative. `grad_vertices` (length V or empty) and
    /// `grad_joints` (length J or empty) are dL/dv and dL/dX. When
    /// `with_beta` is set, dL/dβ is also propagated through the shaped
    /// template and rest joints.
    pub fn backward(
        &self,
        shaped: &ShapedBody,
        pose: &PoseParams,
        state: &PoseState,
        grad_vertices: &[Vec3],
        grad_joints: &[Vec3],
        with_beta: bool,
    ) -> PoseGradient {
        let nj = self.joint_count();
        let nv = self.vertex_count();
        let mut g_rot = vec![Mat3::zeros(); nj];
        let mut g_anchor = vec![Vec3::zeros(); nj];
        let mut g_t = Vec3::zeros();
        let mut g_rest_joint = vec![Vec3::zeros(); nj];
        let mut g_rest_vertex = if with_beta { vec![Vec3::zeros(); nv] } else { Vec::new() };

        // v_i = Σ_j w_ij (Rg_j (V_i − J_j) + a_j + t)
        if !grad_vertices.is_empty() {
            for (i, g) in grad_vertices.iter().enumerate() {
                if g.x == 0.0 && g.y == 0.0 && g.z == 0.0 {
                    continue;
                }
                let rest = shaped.vertices[i];
                for &(j, w) in &self.skinning()[i] {
                    let wg = g * w;
                    let d = rest - shaped.joints[j];
                    g_rot[j] += wg * d.transpose();
                    g_anchor[j] += wg;
                    g_t += wg;
                    if with_beta {
                        let rt = state.global[j].transpose().rotate(&wg);
                        g_rest_vertex[i] += rt;
                        g_rest_joint[j] -= rt;
                    }
                }
            }
        }
        for (j, g) in grad_joints.iter().enumerate() {
            g_anchor[j] += g;
            g_t += g;
        }

        let mut rotations = vec![Vec3::zeros(); nj];
        for j in (0..nj).rev() {
            let grad_local = match self.parent(j) {
                None => {
                    g_rest_joint[j] += g_anchor[j];
                    g_rot[j]
                }
                Some(p) => {
                    let rp = state.global[p];
                    let d = shaped.joints[j] - shaped.joints[p];
                    let ga = g_anchor[j];
                    g_anchor[p] += ga;
                    let grj = g_rot[j];
                    g_rot[p] += ga * d.transpose() + grj * state.local[j].matrix().transpose();
                    if with_beta {
                        let back = rp.transpose().rotate(&ga);
                        g_rest_joint[j] += back;
                        g_rest_joint[p] -= back;
                    }
                    rp.matrix().transpose() * grj
                }
            };
            rotations[j] = exp_vjp(&pose.joint_axis_angle(j), &grad_local);
        }

        let beta = with_beta.then(|| {
            for (j, row) in self.joint_regressor().iter().enumerate() {
                for &(v, w) in row {
                    g_rest_vertex[v] += g_rest_joint[j] * w;
                }
            }
            let mut gb = vec![0.0; self.shape_count()];
            for (v, g) in g_rest_vertex.iter().enumerate() {
                for (b, d) in self.shape_dirs_of(v).iter().enumerate() {
                    gb[b] += d.dot(g);
                }
            }
            gb
        });
        PoseGradient {
            rotations,
            t: g_t,
            beta,
        }
    }

    pub fn forward_kinematics(&self, pose: &PoseParams) -> Result<(Vec<Vec3>, Vec<Rotation>)> {
        pose.check(self)?;
        let shaped = ShapedBody::new(self, &pose.beta)?;
        let state = self.pose_state(&shaped, pose, false)?;
        Ok((state.joints, state.global))
    }

    pub fn skin_mesh(&self, pose: &PoseParams) -> Result<TriangleMesh> {
        pose.check(self)?;
        let shaped = ShapedBody::new(self, &pose.beta)?;
        let state = self.pose_state(&shaped, pose, true)?;
        Ok(TriangleMesh {
            vertices: state.vertices,
            faces: self.faces().to_vec(),
            normals: None,
        })
    }

    pub fn regress_keypoints(&self, mesh: &TriangleMesh) -> Result<Vec<Vec3>> {
        self.regress_keypoints_from(&mesh.vertices)
    }

    pub fn regress_keypoints_from(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        if vertices.len() != self.vertex_count() {
            return Err(Error::DimensionMismatch {
                what: "mesh vertices",
                expected: self.vertex_count(),
                got: vertices.len(),
            });
        }
        Ok(regress(self.keypoint_regressor(), vertices))
    }

    /// Scatters dL/d(keypoint) into dL/d(vertex).
    pub fn keypoint_backward(&self, grad_keypoints: &[Vec3], grad_vertices: &mut [Vec3]) {
        for (row, g) in self.keypoint_regressor().iter().zip(grad_keypoints) {
            for &(v, w) in row {
                grad_vertices[v] += g * w;
            }
        }
    }
}

/// `V + Σ_j w_j ((Rg_j − I)(V − J_j) + δ_j + t)`, which equals the usual
/// `Σ_j w_j (Rg_j (V − J_j) + a_j + t)`.
fn skin_one(row: &super::model::SparseRow, rest: &Vec3, joints: &[Vec3], global: &[Rotation], offsets: &[Vec3]) -> Vec3 {
    let mut disp = Vec3::zeros();
    for &(j, w) in row {
        disp += ((global[j].matrix() - Mat3::identity()) * (rest - joints[j]) + offsets[j]) * w;
    }
    rest + disp
}

/// E_bp: squared violation of the per-axis joint limits, summed over
/// non-root joints. Root orientation is unconstrained.
pub fn joint_limit_penalty(model: &BodyModel, pose: &PoseParams) -> f64 {
    joint_limit_penalty_grad(model, pose, None)
}

/// As [`joint_limit_penalty`], accumulating `scale · dE/dθ_b` into the
/// body-pose part of a flat pose gradient when `grad` is given.
pub fn joint_limit_penalty_grad(model: &BodyModel, pose: &PoseParams, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let mut e = 0.0;
    for (i, theta) in pose.theta_b.iter().enumerate() {
        let limits = model.joint_limits()[i];
        for k in 0..3 {
            let (lo, hi) = limits[k];
            let x = theta[k];
            let d = if x > hi {
                x - hi
            } else if x < lo {
                x - lo
            } else {
                continue;
            };
            e += d * d;
            if let Some((g, scale)) = grad.as_mut() {
                g[3 + 3 * i + k] += *scale * 2.0 * d;
            }
        }
    }
    e
}
