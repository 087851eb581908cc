//! Triangle meshes and closest-point queries.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::rotation::Vec3;
use crate::error::{Error, Result};

/// Minimum face area accepted for shipped assets.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec3>>,
}

/// Which part of a triangle a closest point landed on. Indices are local to
/// the face: vertex `k` is `face[k]`, edge `k` joins `face[k]` and `face[(k+1)%3]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feature {
    Face,
    Edge(u8),
    Vertex(u8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub sq_distance: f64,
    pub face: usize,
    pub feature: Feature,
    /// Barycentric weights of `point` with respect to the face's vertices.
    pub barycentric: [f64; 3],
    pub point: Vec3,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleMesh {
            vertices,
            faces,
            normals: None,
        };
        mesh.validate_indices()?;
        Ok(mesh)
    }

    pub fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("face {i} references a vertex out of range")));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "vertex normals",
                    expected: n,
                    got: normals.len(),
                });
            }
        }
        Ok(())
    }

    pub fn validate_nondegenerate(&self) -> Result<()> {
        for (i, _) in self.faces.iter().enumerate() {
            let a = self.face_area(i);
            if !(a > MIN_FACE_AREA) {
                return Err(Error::Degenerate(format!("face {i} has area {a:e}")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    /// Area-weighted (unnormalized, twice the area) face normal.
    pub fn face_normal_raw(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_normal_raw(face).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for (i, f) in self.faces.iter().enumerate() {
            for &v in f {
                out[v].push(i);
            }
        }
        out
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (i, f) in self.faces.iter().enumerate() {
            let n = self.face_normal_raw(i);
            for &v in f {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }

    /// Every directed edge appears exactly once and so does its reverse.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut edges: HashMap<(usize, usize), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                *edges.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        edges
            .iter()
            .all(|(&(a, b), &count)| count == 1 && edges.get(&(b, a)) == Some(&1))
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        self.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / n
    }

    /// `count` area-weighted uniform samples on the surface.
    pub fn sample_surface<R: rand::Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec3> {
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if count == 0 || !(total > 0.0) {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let r = rng.random::<f64>() * total;
                let f = cumulative.partition_point(|&c| c < r).min(self.faces.len() - 1);
                let [a, b, c] = self.corners(f);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
            normals: None,
        }
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5), with barycentric weights and the feature region.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3], Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0], Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0], Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0], Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0], Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w], Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w], Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w], Feature::Face)
}

fn closest_on_face(p: &Vec3, mesh: &TriangleMesh, face: usize) -> ClosestPoint {
    let [a, b, c] = mesh.corners(face);
    let (point, barycentric, feature) = closest_point_on_triangle(p, &a, &b, &c);
    ClosestPoint {
        sq_distance: (p - point).norm_squared(),
        face,
        feature,
        barycentric,
        point,
    }
}

/// Squared distance from `p` to the mesh surface, by exhaustive scan.
pub fn point_to_mesh_sq_distance(p: &Vec3, mesh: &TriangleMesh) -> Result<ClosestPoint> {
    if mesh.faces.is_empty() {
        return Err(Error::invalid("point-to-mesh query on an empty mesh"));
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("query point".into()));
    }
    let mut best = closest_on_face(p, mesh, 0);
    for f in 1..mesh.faces.len() {
        let cand = closest_on_face(p, mesh, f);
        if cand.sq_distance < best.sq_distance {
            best = cand;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn sq_distance(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    fn hit_by_ray(&self, origin: &Vec3, inv_dir: &Vec3) -> bool {
        let mut tmin: f64 = 0.0;
        let mut tmax = f64::INFINITY;
        for k in 0..3 {
            let t1 = (self.lo[k] - origin[k]) * inv_dir[k];
            let t2 = (self.hi[k] - origin[k]) * inv_dir[k];
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
        tmin <= tmax
    }
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

/// Axis-aligned bounding-volume hierarchy over a mesh's faces. It borrows
/// the mesh so the two cannot drift apart.
#[derive(Debug, Clone)]
pub struct MeshBvh<'m> {
    mesh: &'m TriangleMesh,
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl<'m> MeshBvh<'m> {
    pub fn build(mesh: &'m TriangleMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::invalid("cannot build a BVH over an empty mesh"));
        }
        let centroids: Vec<Vec3> = (0..mesh.faces.len())
            .map(|f| {
                let [a, b, c] = mesh.corners(f);
                (a + b + c) / 3.0
            })
            .collect();
        let mut bvh = MeshBvh {
            mesh,
            nodes: Vec::with_capacity(2 * mesh.faces.len() / LEAF_SIZE + 1),
            order: (0..mesh.faces.len()).collect(),
        };
        let n = bvh.order.len();
        bvh.build_node(&centroids, 0, n);
        Ok(bvh)
    }

    pub fn mesh(&self) -> &TriangleMesh {
        self.mesh
    }

    fn build_node(&mut self, centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &f in &self.order[start..end] {
            for v in self.mesh.corners(f) {
                bounds.grow(&v);
            }
            cbounds.grow(&centroids[f]);
        }
        let idx = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(BvhNode::Leaf { bounds, start, end });
            return idx;
        }
        let extent = cbounds.hi - cbounds.lo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis])
        });
        self.nodes.push(BvhNode::Leaf { bounds, start, end });
        let left = self.build_node(centroids, start, mid);
        let right = self.build_node(centroids, mid, end);
        self.nodes[idx] = BvhNode::Inner { bounds, left, right };
        idx
    }

    /// Same contract as [`point_to_mesh_sq_distance`].
    pub fn closest_point(&self, p: &Vec3) -> ClosestPoint {
        let mut best: Option<ClosestPoint> = None;
        let mut best_d = f64::INFINITY;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds().sq_distance(p) >= best_d {
                continue;
            }
            match *node {
                BvhNode::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let cand = closest_on_face(p, self.mesh, f);
                        if cand.sq_distance < best_d
                            || (cand.sq_distance == best_d && best.is_some_and(|b| f < b.face))
                        {
                            best_d = cand.sq_distance;
                            best = Some(cand);
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().sq_distance(p);
                    let dr = self.nodes[right].bounds().sq_distance(p);
                    if dl < dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.expect("non-empty mesh")
    }

    /// Signed count of ray–surface crossings along `dir` (outward-facing
    /// crossings count +1). `None` when the ray grazes an edge or vertex.
    pub fn signed_crossings(&self, origin: &Vec3, dir: &Vec3) -> Option<i64> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut total = 0i64;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !node.bounds().hit_by_ray(origin, &inv) {
                continue;
            }
            match *node {
                BvhNode::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        match ray_triangle(origin, dir, &self.mesh.corners(f)) {
                            RayHit::Miss => {}
                            RayHit::Grazing => return None,
                            RayHit::Hit(sign) => total += sign,
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        Some(total)
    }
}

pub(crate) enum RayHit {
    Miss,
    Grazing,
    Hit(i64),
}

/// Möller–Trumbore, reporting the crossing orientation.
pub(crate) fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> RayHit {
    const EPS: f64 = 1e-12;
    const EDGE: f64 = 1e-9;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < EPS {
        return RayHit::Miss;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - tri[0];
    let u = tvec.dot(&pvec) * inv_det;
    if u < -EDGE || u > 1.0 + EDGE {
        return RayHit::Miss;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < -EDGE || u + v > 1.0 + EDGE {
        return RayHit::Miss;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t < 0.0 {
        return RayHit::Miss;
    }
    if u < EDGE || v < EDGE || u + v > 1.0 - EDGE || t < EDGE {
        return RayHit::Grazing;
    }
    // det > 0 means the ray runs against the face normal (entering).
    RayHit::Hit(if det > 0.0 { -1 } else { 1 })
}
