use serde::{Deserialize, Serialize};

use super::model::BodyModel;
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Rotation, Vec3};

/// Ω = (θ_r, θ_b, t, β).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta_r: Vec3,
    /// One axis-angle per non-root joint.
    pub theta_b: Vec<Vec3>,
    pub t: Vec3,
    pub beta: Vec<f64>,
}

impl PoseParams {
    pub fn zero(model: &BodyModel) -> Self {
        PoseParams {
            theta_r: Vec3::zeros(),
            theta_b: vec![Vec3::zeros(); model.joint_count() - 1],
            t: Vec3::zeros(),
            beta: vec![0.0; model.shape_count()],
        }
    }

    pub fn with_beta(mut self, beta: &[f64]) -> Self {
        self.beta = beta.to_vec();
        self
    }

    pub fn check(&self, model: &BodyModel) -> Result<()> {
        if self.theta_b.len() + 1 != model.joint_count() {
            return Err(Error::DimensionMismatch {
                what: "body pose joints",
                expected: model.joint_count() - 1,
                got: self.theta_b.len(),
            });
        }
        if self.beta.len() != model.shape_count() {
            return Err(Error::DimensionMismatch {
                what: "shape coefficients",
                expected: model.shape_count(),
                got: self.beta.len(),
            });
        }
        let finite = self.theta_r.iter().chain(self.t.iter()).all(|v| v.is_finite())
            && self.theta_b.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.beta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("pose parameters".into()));
        }
        Ok(())
    }

    /// Axis-angle of joint `j` (root when `j == 0`).
    pub fn joint_axis_angle(&self, j: usize) -> Vec3 {
        if j == 0 {
            self.theta_r
        } else {
            self.theta_b[j - 1]
        }
    }

    /// Length of the flat pose vector for `joints` joints: `[θ_r, θ_b, t]`.
    pub fn flat_len(joints: usize) -> usize {
        3 * joints + 3
    }

    /// `[θ_r (3), θ_b (3·(J−1)), t (3)]`; β is not part of the vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.theta_b.len() + 6);
        out.extend_from_slice(self.theta_r.as_slice());
        for v in &self.theta_b {
            out.extend_from_slice(v.as_slice());
        }
        out.extend_from_slice(self.t.as_slice());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat); β is taken from `self`.
    pub fn from_flat(&self, x: &[f64]) -> PoseParams {
        let j = self.theta_b.len() + 1;
        assert_eq!(x.len(), Self::flat_len(j), "flat pose length");
        PoseParams {
            theta_r: Vec3::new(x[0], x[1], x[2]),
            theta_b: (1..j).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect(),
            t: Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]),
            beta: self.beta.clone(),
        }
    }

    /// Pre-applies a rigid world motion `G` to the root: the posed body
    /// becomes `G` applied to the original posed body. `root_rest` is the
    /// model's rest root joint location (the rotation centre of θ_r).
    pub fn transformed(&self, g: &RigidTransform, root_rest: &Vec3) -> PoseParams {
        let r = Rotation::from_axis_angle(&self.theta_r);
        let r2 = g.rotation * r;
        let root = root_rest + self.t;
        let root2 = g.apply(&root);
        PoseParams {
            theta_r: r2.to_axis_angle(),
            theta_b: self.theta_b.clone(),
            t: root2 - root_rest,
            beta: self.beta.clone(),
        }
    }
}

/// Flat-vector slices of the pose layout.
pub mod layout {
    use std::ops::Range;

    pub fn root_rotation() -> Range<usize> {
        0..3
    }

    pub fn body(joints: usize) -> Range<usize> {
        3..3 * joints
    }

    pub fn translation(joints: usize) -> Range<usize> {
        3 * joints..3 * joints + 3
    }
}

/// Which parameter groups of the flat pose vector an optimiser may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseGroups {
    pub root_rotation: bool,
    pub body: bool,
    pub translation: bool,
}

impl PoseGroups {
    pub const ALL: PoseGroups = PoseGroups {
        root_rotation: true,
        body: true,
        translation: true,
    };
    pub const ROOT: PoseGroups = PoseGroups {
        root_rotation: true,
        body: false,
        translation: true,
    };
    pub const ROTATIONS: PoseGroups = PoseGroups {
        root_rotation: true,
        body: true,
        translation: false,
    };

    /// Flat indices of the selected groups. Body axes with zero-width
    /// limits are never free.
    pub fn indices(&self, model: &BodyModel) -> Vec<usize> {
        let j = model.joint_count();
        let locked = model.locked_axes();
        let mut out = Vec::with_capacity(PoseParams::flat_len(j));
        if self.root_rotation {
            out.extend(layout::root_rotation());
        }
        if self.body {
            out.extend(layout::body(j).filter(|&i| !locked[i - 3]));
        }
        if self.translation {
            out.extend(layout::translation(j));
        }
        out
    }
}
