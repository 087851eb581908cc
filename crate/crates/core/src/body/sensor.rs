//! Mesh-attached sensor anchors and virtual sensor synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Rotation, TriangleMesh, Vec3};

const DEGENERATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorAnchor {
    pub sensor_id: usize,
    pub anchor_vertex: usize,
    pub frame_vertex: usize,
    /// Faces around `anchor_vertex`, used for its normal.
    pub one_ring: Vec<usize>,
    /// Q_s.
    pub offset_rotation: Rotation,
    /// v_s, metres.
    pub offset_translation: Vec3,
}

impl SensorAnchor {
    /// Anchor with identity offsets, its one-ring taken from `faces`.
    pub fn new(sensor_id: usize, anchor_vertex: usize, frame_vertex: usize, faces: &[[usize; 3]]) -> Result<Self> {
        if anchor_vertex == frame_vertex {
            return Err(Error::invalid(format!("sensor {sensor_id}: anchor and frame vertex coincide")));
        }
        let one_ring: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.contains(&anchor_vertex))
            .map(|(i, _)| i)
            .collect();
        if one_ring.is_empty() {
            return Err(Error::invalid(format!("sensor {sensor_id}: anchor vertex {anchor_vertex} has no faces")));
        }
        Ok(SensorAnchor {
            sensor_id,
            anchor_vertex,
            frame_vertex,
            one_ring,
            offset_rotation: Rotation::identity(),
            offset_translation: Vec3::zeros(),
        })
    }

    pub fn with_offset(mut self, q: Rotation, v: Vec3) -> Self {
        self.offset_rotation = q;
        self.offset_translation = v;
        self
    }

    pub fn without_offset(&self) -> Self {
        self.clone().with_offset(Rotation::identity(), Vec3::zeros())
    }

    pub fn validate(&self, mesh: &TriangleMesh) -> Result<()> {
        let n = mesh.vertices.len();
        if self.anchor_vertex >= n || self.frame_vertex >= n {
            return Err(Error::invalid(format!("sensor {}: anchor indices out of range", self.sensor_id)));
        }
        if self.anchor_vertex == self.frame_vertex {
            return Err(Error::invalid(format!("sensor {}: anchor and frame vertex coincide", self.sensor_id)));
        }
        for &f in &self.one_ring {
            if f >= mesh.faces.len() || !mesh.faces[f].contains(&self.anchor_vertex) {
                return Err(Error::invalid(format!("sensor {}: one-ring face {f} is invalid", self.sensor_id)));
            }
        }
        Ok(())
    }
}

/// Intermediate values of the anchor-frame construction, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct AnchorFrame {
    /// p̃_s.
    pub position: Vec3,
    /// R̃_s = [x, y, n].
    pub rotation: Rotation,
    n_raw_norm: f64,
    x_raw_norm: f64,
    edge: Vec3,
}

/// Builds p̃_s and R̃_s from the mesh: normal at the anchor vertex, the
/// edge to the frame vertex orthogonalized against it, and their cross
/// product.
pub fn anchor_frame(vertices: &[Vec3], faces: &[[usize; 3]], anchor: &SensorAnchor) -> Result<AnchorFrame> {
    let mut n_raw = Vec3::zeros();
    for &f in &anchor.one_ring {
        let [a, b, c] = faces[f];
        n_raw += (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
    }
    let n_len = n_raw.norm();
    if !(n_len > 0.0) {
        return Err(Error::Degenerate(format!("sensor {}: anchor normal vanishes", anchor.sensor_id)));
    }
    let n = n_raw / n_len;
    let p = vertices[anchor.anchor_vertex];
    let e = vertices[anchor.frame_vertex] - p;
    let x_raw = e - n * n.dot(&e);
    let x_len = x_raw.norm();
    if !(x_len > DEGENERATE_TOL * e.norm()) || !(x_len > 0.0) {
        return Err(Error::Degenerate(format!(
            "sensor {}: frame edge is parallel to the anchor normal",
            anchor.sensor_id
        )));
    }
    let x = x_raw / x_len;
    let y = n.cross(&x);
    Ok(AnchorFrame {
        position: p,
        rotation: Rotation::from_matrix_unchecked(Mat3::from_columns(&[x, y, n])),
        n_raw_norm: n_len,
        x_raw_norm: x_len,
        edge: e,
    })
}

/// Virtual sensor `(p^v, R^v) = (p̃ + R̃·v, R̃·Q)`.
pub fn virtual_sensor(mesh: &TriangleMesh, anchor: &SensorAnchor) -> Result<(Vec3, Rotation)> {
    anchor.validate(mesh)?;
    let frame = anchor_frame(&mesh.vertices, &mesh.faces, anchor)?;
    Ok(apply_anchor_offset(&frame, anchor))
}

pub fn apply_anchor_offset(frame: &AnchorFrame, anchor: &SensorAnchor) -> (Vec3, Rotation) {
    (
        frame.position + frame.rotation.rotate(&anchor.offset_translation),
        frame.rotation * anchor.offset_rotation,
    )
}

/// Scatters dL/dp^v and dL/dR^v into dL/d(vertex). `grad_vertices` is
/// indexed by mesh vertex.
pub fn virtual_sensor_backward(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    anchor: &SensorAnchor,
    frame: &AnchorFrame,
    grad_p: &Vec3,
    grad_r: &Mat3,
    grad_vertices: &mut [Vec3],
) {
    // dL/dR̃ from R^v = R̃Q and p^v = p̃ + R̃v.
    let g_frame = grad_r * anchor.offset_rotation.matrix().transpose() + grad_p * anchor.offset_translation.transpose();
    anchor_frame_backward(vertices, faces, anchor, frame, grad_p, &g_frame, grad_vertices);
}

/// Scatters dL/dp̃ and dL/dR̃ into dL/d(vertex).
pub fn anchor_frame_backward(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    anchor: &SensorAnchor,
    frame: &AnchorFrame,
    grad_position: &Vec3,
    grad_rotation: &Mat3,
    grad_vertices: &mut [Vec3],
) {
    let m = frame.rotation.matrix();
    let x: Vec3 = m.column(0).into();
    let n: Vec3 = m.column(2).into();
    let gx0: Vec3 = grad_rotation.column(0).into();
    let gy: Vec3 = grad_rotation.column(1).into();
    let mut gn: Vec3 = grad_rotation.column(2).into();

    // y = n × x
    gn += x.cross(&gy);
    let gx = gx0 + gy.cross(&n);

    // x = x_raw / |x_raw|
    let gx_raw = (gx - x * x.dot(&gx)) / frame.x_raw_norm;
    // x_raw = e − n (n·e)
    let e = frame.edge;
    let ge = gx_raw - n * n.dot(&gx_raw);
    gn -= gx_raw * n.dot(&e) + e * n.dot(&gx_raw);

    // n = n_raw / |n_raw|
    let gn_raw = (gn - n * n.dot(&gn)) / frame.n_raw_norm;
    for &f in &anchor.one_ring {
        let [a, b, c] = faces[f];
        let p = vertices[b] - vertices[a];
        let q = vertices[c] - vertices[a];
        let gp = q.cross(&gn_raw);
        let gq = gn_raw.cross(&p);
        grad_vertices[b] += gp;
        grad_vertices[c] += gq;
        grad_vertices[a] -= gp + gq;
    }
    grad_vertices[anchor.frame_vertex] += ge;
    grad_vertices[anchor.anchor_vertex] += grad_position - ge;
}
