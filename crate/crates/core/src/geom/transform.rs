use serde::{Deserialize, Serialize};
use std::ops::Mul;

use super::rotation::{Rotation, Vec3};
use crate::error::{Error, Result};

/// `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_rotation(&self, r: &Rotation) -> Rotation {
        self.rotation * *r
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// `x ↦ s·R·x + t` with `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Rotation, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("similarity scale must be positive, got {scale}")));
        }
        Ok(SimilarityTransform {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    pub fn apply_all(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    pub fn compose(&self, rhs: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * rhs.scale,
            rotation: self.rotation * rhs.rotation,
            translation: self.apply(&rhs.translation),
        }
    }
}

impl From<RigidTransform> for SimilarityTransform {
    fn from(t: RigidTransform) -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: t.rotation,
            translation: t.translation,
        }
    }
}

/// Applies a constant rigid offset `(t_o, R_o)` to a pose `(q, U)`:
/// returns `(U·R_o·t_o + q, U·R_o)`.
pub fn apply_offset(q: &Vec3, u: &Rotation, t_o: &Vec3, r_o: &Rotation) -> (Vec3, Rotation) {
    let ur = *u * *r_o;
    (ur.rotate(t_o) + q, ur)
}

/// The offset that undoes `(t_o, R_o)` under [`apply_offset`].
pub fn invert_offset(t_o: &Vec3, r_o: &Rotation) -> (Vec3, Rotation) {
    (-r_o.rotate(t_o), r_o.transpose())
}
