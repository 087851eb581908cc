use nalgebra::{DMatrix, DVector, Matrix3x4};

use super::MultiViewObservation;
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Smallest-to-largest singular value ratio below which the linear system
/// is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    /// `None` for keypoints seen by fewer than two views, or whose views
    /// do not fix a point.
    pub points: Vec<Option<Vec3>>,
    /// RMS reprojection error in pixels over the views used.
    pub residuals: Vec<Option<f64>>,
    /// Set where the views were sufficient in number but their rays do not
    /// intersect in a single point (e.g. a point on the camera baseline).
    pub degenerate: Vec<bool>,
}

impl Triangulation {
    pub fn present(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

/// Linear triangulation of every keypoint of `frame`: each view with
/// confidence ≥ `min_confidence` contributes the two rows `x·P₃ − P₁`,
/// `y·P₃ − P₂`, and the inhomogeneous system is solved by least squares.
pub fn triangulate_keypoints(obs: &MultiViewObservation, frame: usize, min_confidence: f64) -> Result<Triangulation> {
    obs.validate()?;
    if frame >= obs.frame_count() {
        return Err(Error::invalid(format!("frame {frame} out of range")));
    }
    let projections: Vec<Matrix3x4<f64>> = obs
        .views
        .iter()
        .map(|v| {
            let mut rt = Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(v.extrinsics.rotation.matrix());
            rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&v.extrinsics.translation);
            v.camera.k * rt
        })
        .collect();
    let count = obs.views.iter().map(|v| v.keypoints[frame].len()).max().unwrap_or(0);
    let mut out = Triangulation {
        points: vec![None; count],
        residuals: vec![None; count],
        degenerate: vec![false; count],
    };
    for k in 0..count {
        let used: Vec<usize> = (0..obs.views.len())
            .filter(|&v| {
                obs.views[v].keypoints[frame]
                    .get(k)
                    .is_some_and(|kp| kp.c >= min_confidence && kp.c > 0.0)
            })
            .collect();
        if used.len() < 2 {
            continue;
        }
        let mut a = DMatrix::zeros(2 * used.len(), 3);
        let mut b = DVector::zeros(2 * used.len());
        for (row, &v) in used.iter().enumerate() {
            let kp = &obs.views[v].keypoints[frame][k];
            let p = &projections[v];
            for (r, (coord, axis)) in [(kp.x, 0), (kp.y, 1)].into_iter().enumerate() {
                let eq = p.row(2) * coord - p.row(axis);
                // Row scaling keeps views comparable regardless of depth.
                let norm = eq.fixed_columns::<3>(0).norm().max(f64::MIN_POSITIVE);
                for c in 0..3 {
                    a[(2 * row + r, c)] = eq[c] / norm;
                }
                b[2 * row + r] = -eq[3] / norm;
            }
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > RANK_TOL * smax) {
            out.degenerate[k] = true;
            continue;
        }
        let x = svd
            .solve(&b, f64::EPSILON)
            .map_err(|e| Error::Degenerate(format!("keypoint {k}: {e}")))?;
        let x = Vec3::new(x[0], x[1], x[2]);
        let mut sq = 0.0;
        let mut behind = false;
        for &v in &used {
            let view = &obs.views[v];
            match view.camera.project(&view.extrinsics, &x) {
                Some(px) => sq += (px - view.keypoints[frame][k].position()).norm_squared(),
                None => behind = true,
            }
        }
        if behind {
            out.degenerate[k] = true;
            continue;
        }
        out.points[k] = Some(x);
        out.residuals[k] = Some((sq / used.len() as f64).sqrt());
    }
    Ok(out)
}
