//! SO(3) rotations stored as matrices, with axis-angle and quaternion
//! conversions at the parameter boundary.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Orthonormality tolerance used when validating external matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn from_matrix(m: Mat3) -> Result<Self> {
        Self::from_matrix_tol(m, ORTHONORMAL_TOL)
    }

    pub fn from_matrix_tol(m: Mat3, tol: f64) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix".into()));
        }
        let err = (m * m.transpose() - Mat3::identity()).abs().max();
        let det = m.determinant();
        if err > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (orthogonality error {err:e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Nearest rotation in the Frobenius sense.
    pub fn project(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * vt)
    }

    /// Row-major 9-element array, the on-disk layout. Matrices that are
    /// orthonormal to rounding are kept bit-exact; others within 1e-6 are
    /// projected onto SO(3).
    pub fn from_row_major(a: &[f64; 9]) -> Result<Self> {
        let m = Mat3::from_row_slice(a);
        if let Ok(r) = Self::from_matrix_tol(m, 1e-12) {
            return Ok(r);
        }
        Self::from_matrix_tol(m, 1e-6).map(|r| Self::project(&r.0))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(&(Vec3::x() * angle))
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(&(Vec3::y() * angle))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(&(Vec3::z() * angle))
    }

    /// Rodrigues' formula.
    pub fn from_axis_angle(v: &Vec3) -> Self {
        let (a, b) = rodrigues_coefficients(v.norm_squared());
        let k = skew(v);
        Rotation(Mat3::identity() + k * a + k * k * b)
    }

    /// Logarithm map. Angles are in `[0, π]`; at exactly π the axis sign is
    /// chosen so that its first nonzero component is non-negative.
    pub fn to_axis_angle(&self) -> Vec3 {
        let m = &self.0;
        let w = Vec3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
        let sin_theta = 0.5 * w.norm();
        let cos_theta = 0.5 * (m.trace() - 1.0);
        let theta = sin_theta.atan2(cos_theta);
        if theta < 1e-5 {
            // theta / sin(theta) ~ 1 + theta^2 / 6
            return w * (0.5 * (1.0 + theta * theta / 6.0));
        }
        if theta < std::f64::consts::PI - 1e-4 {
            return w * (0.5 * theta / sin_theta);
        }
        // Near pi: axis from the symmetric part, B = (1 - cos) n n^T.
        let b = (m + m.transpose()) * 0.5 - Mat3::identity() * cos_theta;
        let mut col = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(col, col)] {
                col = i;
            }
        }
        let mut n: Vec3 = b.column(col).into_owned();
        n /= n.norm();
        if w.norm() > 1e-12 {
            if n.dot(&w) < 0.0 {
                n = -n;
            }
        } else if let Some(first) = n.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                n = -n;
            }
        }
        n * theta
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let v = self.to_axis_angle();
        let theta = v.norm();
        if theta < 1e-300 {
            return UnitQuaternion::identity();
        }
        let half = 0.5 * theta;
        let axis = v / theta;
        UnitQuaternion::new_unchecked(Quaternion::new(
            half.cos(),
            axis.x * half.sin(),
            axis.y * half.sin(),
            axis.z * half.sin(),
        ))
    }

    /// Geodesic angle to another rotation, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).angle()
    }

    pub fn angle(&self) -> f64 {
        self.to_axis_angle().norm()
    }

    /// Squared Frobenius distance to another rotation.
    pub fn frobenius_sq(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm_squared()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = Error;
    fn try_from(a: [f64; 9]) -> Result<Self> {
        Rotation::from_row_major(&a)
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> [f64; 9] {
        r.to_row_major()
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(sin θ / θ, (1 − cos θ) / θ²)` as functions of θ².
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64) {
    if theta_sq < 2.5e-3 {
        let t2 = theta_sq;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    }
}

/// Partial derivatives `∂R/∂v_k` of the exponential map at `v`.
pub fn exp_jacobian(v: &Vec3) -> [Mat3; 3] {
    let t2 = v.norm_squared();
    let (a, b) = rodrigues_coefficients(t2);
    // (da/dθ)/θ and (db/dθ)/θ
    let (ca, cb) = if t2 < 2.5e-3 {
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let th = t2.sqrt();
        let (s, c) = th.sin_cos();
        (
            (th * c - s) / (t2 * th),
            (th * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    let k = skew(v);
    let k2 = k * k;
    let mut out = [Mat3::zeros(); 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let e = skew(&Vec3::ith(axis, 1.0));
        *slot = e * a + (e * k + k * e) * b + k * (ca * v[axis]) + k2 * (cb * v[axis]);
    }
    out
}

/// Chain rule through the exponential map: `∂L/∂v` from `∂L/∂R`.
pub fn exp_vjp(v: &Vec3, grad_r: &Mat3) -> Vec3 {
    let jac = exp_jacobian(v);
    Vec3::new(
        jac[0].component_mul(grad_r).sum(),
        jac[1].component_mul(grad_r).sum(),
        jac[2].component_mul(grad_r).sum(),
    )
}

/// Flips quaternion signs so consecutive elements have non-negative dot
/// product. The first element is kept as given.
pub fn quaternion_sign_continuity(seq: &[UnitQuaternion<f64>]) -> Result<Vec<UnitQuaternion<f64>>> {
    let mut out: Vec<UnitQuaternion<f64>> = Vec::with_capacity(seq.len());
    for (i, q) in seq.iter().enumerate() {
        let norm = q.as_ref().norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("quaternion {i} has norm {norm}")));
        }
        let q = match out.last() {
            Some(prev) if prev.as_ref().dot(q.as_ref()) < 0.0 => UnitQuaternion::new_unchecked(-q.into_inner()),
            _ => *q,
        };
        out.push(q);
    }
    Ok(out)
}
