use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{TriangleMesh, Vec3};

/// Sparse row: `(column, weight)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

const STOCHASTIC_TOL: f64 = 1e-6;
pub const MAX_INFLUENCES: usize = 4;

/// Articulated skinned body: kinematic tree, template mesh, skinning weights,
/// shape blendshapes and linear regressors for joints and keypoints.
///
/// Joints are topologically ordered (`parent[j] < j`), which is what makes the
/// parent array a tree rooted at joint 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyModelAsset", into = "BodyModelAsset")]
pub struct BodyModel {
    parents: Vec<Option<usize>>,
    template: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    skinning: Vec<SparseRow>,
    /// Index `v * B + b`.
    shape_dirs: Vec<Vec3>,
    shape_count: usize,
    joint_regressor: Vec<SparseRow>,
    keypoint_regressor: Vec<SparseRow>,
    /// Index `j - 1` for non-root joint `j`; per axis `(lo, hi)`.
    joint_limits: Vec<[(f64, f64); 3]>,
}

pub struct BodyModelParts {
    pub parents: Vec<Option<usize>>,
    pub template: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub skinning: Vec<SparseRow>,
    pub shape_dirs: Vec<Vec<Vec3>>,
    pub joint_regressor: Vec<SparseRow>,
    pub keypoint_regressor: Vec<SparseRow>,
    pub joint_limits: Vec<[(f64, f64); 3]>,
}

impl BodyModel {
    /// `shape_dirs` is indexed `[b][v]`.
    pub fn from_parts(parts: BodyModelParts) -> Result<Self> {
        let v = parts.template.len();
        let b = parts.shape_dirs.len();
        for (i, dir) in parts.shape_dirs.iter().enumerate() {
            if dir.len() != v {
                return Err(Error::invalid(format!(
                    "shape direction {i} has {} vertices, template has {v}",
                    dir.len()
                )));
            }
        }
        let mut shape_dirs = vec![Vec3::zeros(); v * b];
        for (bi, dir) in parts.shape_dirs.iter().enumerate() {
            for (vi, d) in dir.iter().enumerate() {
                shape_dirs[vi * b + bi] = *d;
            }
        }
        let model = BodyModel {
            parents: parts.parents,
            template: parts.template,
            faces: parts.faces,
            skinning: parts.skinning,
            shape_dirs,
            shape_count: b,
            joint_regressor: parts.joint_regressor,
            keypoint_regressor: parts.keypoint_regressor,
            joint_limits: parts.joint_limits,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        let v = self.template.len();
        if j == 0 {
            return Err(Error::invalid("body model has no joints"));
        }
        if self.parents[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return Err(Error::invalid(format!("joint {i} must have a parent with a smaller index"))),
            }
        }
        if v == 0 {
            return Err(Error::invalid("body model has no vertices"));
        }
        if self.template.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("template vertices".into()));
        }
        let mesh = TriangleMesh {
            vertices: self.template.clone(),
            faces: self.faces.clone(),
            normals: None,
        };
        mesh.validate_indices()?;
        mesh.validate_nondegenerate()?;

        if self.skinning.len() != v {
            return Err(Error::DimensionMismatch {
                what: "skinning weight rows",
                expected: v,
                got: self.skinning.len(),
            });
        }
        for (i, row) in self.skinning.iter().enumerate() {
            if row.len() > MAX_INFLUENCES {
                return Err(Error::invalid(format!("vertex {i} has {} skinning influences", row.len())));
            }
            check_stochastic_row(row, j, "skinning weights", i)?;
        }
        if self.shape_dirs.len() != v * self.shape_count {
            return Err(Error::DimensionMismatch {
                what: "shape directions",
                expected: v * self.shape_count,
                got: self.shape_dirs.len(),
            });
        }
        if self.shape_dirs.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("shape directions".into()));
        }
        if self.joint_regressor.len() != j {
            return Err(Error::DimensionMismatch {
                what: "joint regressor rows",
                expected: j,
                got: self.joint_regressor.len(),
            });
        }
        for (i, row) in self.joint_regressor.iter().enumerate() {
            check_stochastic_row(row, v, "joint regressor", i)?;
        }
        for (i, row) in self.keypoint_regressor.iter().enumerate() {
            for &(c, w) in row {
                if c >= v || !w.is_finite() {
                    return Err(Error::invalid(format!("keypoint regressor row {i} has an invalid entry")));
                }
            }
        }
        if self.joint_limits.len() != j - 1 {
            return Err(Error::DimensionMismatch {
                what: "joint limits",
                expected: j - 1,
                got: self.joint_limits.len(),
            });
        }
        for (i, axes) in self.joint_limits.iter().enumerate() {
            for &(lo, hi) in axes {
                if !(lo <= 0.0 && 0.0 <= hi) {
                    return Err(Error::invalid(format!(
                        "joint {} limit ({lo}, {hi}) must bracket zero",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_count
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_regressor.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn skinning(&self) -> &[SparseRow] {
        &self.skinning
    }

    /// Displacement of vertex `v` per unit of shape coefficient `b`.
    pub fn shape_dir(&self, v: usize, b: usize) -> Vec3 {
        self.shape_dirs[v * self.shape_count + b]
    }

    pub(crate) fn shape_dirs_of(&self, v: usize) -> &[Vec3] {
        &self.shape_dirs[v * self.shape_count..(v + 1) * self.shape_count]
    }

    pub fn joint_regressor(&self) -> &[SparseRow] {
        &self.joint_regressor
    }

    pub fn keypoint_regressor(&self) -> &[SparseRow] {
        &self.keypoint_regressor
    }

    /// Limits of non-root joint `j` (`j ≥ 1`).
    pub fn joint_limit(&self, j: usize) -> [(f64, f64); 3] {
        self.joint_limits[j - 1]
    }

    pub fn joint_limits(&self) -> &[[(f64, f64); 3]] {
        &self.joint_limits
    }

    /// Body-pose axes whose limits have zero width. They carry no degree of
    /// freedom and optimizers keep them fixed. Index `3 * (j - 1) + axis`.
    pub fn locked_axes(&self) -> Vec<bool> {
        self.joint_limits
            .iter()
            .flat_map(|axes| axes.iter().map(|&(lo, hi)| lo == hi))
            .collect()
    }

    pub fn template_mesh(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.template.clone(),
            faces: self.faces.clone(),
            normals: None,
        }
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.template.len()];
        for (i, f) in self.faces.iter().enumerate() {
            for &v in f {
                out[v].push(i);
            }
        }
        out
    }

    /// Largest singular value of the `3V × B` shape basis (power iteration
    /// on the Gram matrix).
    pub fn shape_basis_norm(&self) -> f64 {
        let b = self.shape_count;
        if b == 0 {
            return 0.0;
        }
        let mut gram = nalgebra::DMatrix::<f64>::zeros(b, b);
        for v in 0..self.template.len() {
            let dirs = self.shape_dirs_of(v);
            for i in 0..b {
                for k in 0..b {
                    gram[(i, k)] += dirs[i].dot(&dirs[k]);
                }
            }
        }
        gram.symmetric_eigenvalues().max().max(0.0).sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "body model".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "body model".into(),
            detail: e.to_string(),
        })
    }
}

fn check_stochastic_row(row: &SparseRow, cols: usize, what: &str, i: usize) -> Result<()> {
    let mut sum = 0.0;
    for &(c, w) in row {
        if c >= cols {
            return Err(Error::invalid(format!("{what} row {i} references column {c} of {cols}")));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::invalid(format!("{what} row {i} has weight {w}")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(format!("{what} row {i} sums to {sum}")));
    }
    Ok(())
}

/// On-disk layout of a body model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyModelAsset {
    /// `-1` marks the root.
    pub parents: Vec<i64>,
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// `(vertex, joint, weight)`.
    pub skinning_weights: Vec<(usize, usize, f64)>,
    /// `V × 3 × B`.
    pub shape_dirs: Vec<[Vec<f64>; 3]>,
    /// `(joint, vertex, weight)`.
    pub joint_regressor: Vec<(usize, usize, f64)>,
    /// `(keypoint, vertex, weight)`.
    pub keypoint_regressor: Vec<(usize, usize, f64)>,
    pub keypoint_count: usize,
    /// Per non-root joint, per axis `[lo, hi]` radians.
    pub joint_limits: Vec<[[f64; 2]; 3]>,
}

fn rows_from_triplets(triplets: &[(usize, usize, f64)], rows: usize, what: &str) -> Result<Vec<SparseRow>> {
    let mut out = vec![SparseRow::new(); rows];
    for &(r, c, w) in triplets {
        if r >= rows {
            return Err(Error::invalid(format!("{what} triplet row {r} out of range")));
        }
        out[r].push((c, w));
    }
    Ok(out)
}

fn triplets_from_rows(rows: &[SparseRow]) -> Vec<(usize, usize, f64)> {
    rows.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().map(move |&(c, w)| (r, c, w)))
        .collect()
}

impl TryFrom<BodyModelAsset> for BodyModel {
    type Error = Error;

    fn try_from(a: BodyModelAsset) -> Result<Self> {
        let parents = a
            .parents
            .iter()
            .map(|&p| usize::try_from(p).ok())
            .collect::<Vec<_>>();
        if a.parents.iter().any(|&p| p < -1) {
            return Err(Error::invalid("parent indices must be -1 or non-negative"));
        }
        let v = a.template_vertices.len();
        let j = parents.len();
        let b = a.shape_dirs.first().map_or(0, |d| d[0].len());
        if a.shape_dirs.len() != v {
            return Err(Error::DimensionMismatch {
                what: "shape_dirs vertices",
                expected: v,
                got: a.shape_dirs.len(),
            });
        }
        let mut dirs = vec![vec![Vec3::zeros(); v]; b];
        for (vi, d) in a.shape_dirs.iter().enumerate() {
            if d.iter().any(|c| c.len() != b) {
                return Err(Error::invalid(format!("shape_dirs entry {vi} has inconsistent width")));
            }
            for (bi, dir) in dirs.iter_mut().enumerate() {
                dir[vi] = Vec3::new(d[0][bi], d[1][bi], d[2][bi]);
            }
        }
        BodyModel::from_parts(BodyModelParts {
            parents,
            template: a.template_vertices.iter().map(|p| Vec3::from(*p)).collect(),
            faces: a.faces,
            skinning: rows_from_triplets(&a.skinning_weights, v, "skinning")?,
            shape_dirs: dirs,
            joint_regressor: rows_from_triplets(&a.joint_regressor, j, "joint regressor")?,
            keypoint_regressor: rows_from_triplets(&a.keypoint_regressor, a.keypoint_count, "keypoint regressor")?,
            joint_limits: a
                .joint_limits
                .iter()
                .map(|axes| [(axes[0][0], axes[0][1]), (axes[1][0], axes[1][1]), (axes[2][0], axes[2][1])])
                .collect(),
        })
    }
}

impl From<BodyModel> for BodyModelAsset {
    fn from(m: BodyModel) -> Self {
        let b = m.shape_count;
        BodyModelAsset {
            parents: m.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            template_vertices: m.template.iter().map(|p| [p.x, p.y, p.z]).collect(),
            faces: m.faces.clone(),
            skinning_weights: m
                .skinning
                .iter()
                .enumerate()
                .flat_map(|(vi, row)| row.iter().map(move |&(j, w)| (vi, j, w)))
                .collect(),
            shape_dirs: (0..m.template.len())
                .map(|vi| {
                    let d = &m.shape_dirs[vi * b..(vi + 1) * b];
                    [
                        d.iter().map(|x| x.x).collect(),
                        d.iter().map(|x| x.y).collect(),
                        d.iter().map(|x| x.z).collect(),
                    ]
                })
                .collect(),
            joint_regressor: triplets_from_rows(&m.joint_regressor),
            keypoint_regressor: triplets_from_rows(&m.keypoint_regressor),
            keypoint_count: m.keypoint_regressor.len(),
            joint_limits: m
                .joint_limits
                .iter()
                .map(|a| [[a[0].0, a[0].1], [a[1].0, a[1].1], [a[2].0, a[2].1]])
                .collect(),
        }
    }
}
