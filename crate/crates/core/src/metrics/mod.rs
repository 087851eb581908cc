//! Pose, shape and trajectory error metrics. Inputs are in metres, outputs
//! in millimetres (positions), degrees (angles) or the units noted.

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseParams};
use crate::calib::{loop_closure_drift, mean_std, LoopDrift};
use crate::error::{Error, Result};
use crate::geom::{procrustes_align, Rotation, SimilarityTransform, Vec3};

/// Per-frame point sets, `[frame][point]`.
pub type Frames = [Vec<Vec3>];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Raw,
    /// Root joint subtracted per frame.
    HipAligned,
    /// Similarity Procrustes per frame.
    Procrustes,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(x: &[f64]) -> Stat {
        let (mean, std) = mean_std(x);
        Stat { mean, std }
    }
}

fn check_shapes(pred: &Frames, gt: &Frames, what: &'static str) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what,
            expected: gt.len(),
            got: pred.len(),
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::DimensionMismatch {
                what,
                expected: g.len(),
                got: p.len(),
            });
        }
    }
    if pred.is_empty() {
        return Err(Error::invalid(format!("{what}: empty sequence")));
    }
    Ok(())
}

fn mean_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Per-frame mean point distance (mm) after `mode`. `roots` supplies the
/// per-frame reference points for hip alignment.
fn per_frame_point_error(pred: &Frames, gt: &Frames, mode: Alignment, roots: Option<(&[Vec3], &[Vec3])>) -> Result<Vec<f64>> {
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (p, g))| {
            let e = match mode {
                Alignment::Raw => mean_distance(p, g),
                Alignment::HipAligned => {
                    let (rp, rg) = match roots {
                        Some((rp, rg)) => (rp[t], rg[t]),
                        None => (p[0], g[0]),
                    };
                    p.iter().zip(g).map(|(x, y)| ((x - rp) - (y - rg)).norm()).sum::<f64>() / p.len() as f64
                }
                Alignment::Procrustes => {
                    let s = procrustes_align(p, g, true)?;
                    mean_distance(&s.apply_all(p), g)
                }
            };
            Ok(e * 1e3)
        })
        .collect()
}

/// Mean per-joint position error (mm). The root is joint 0.
pub fn mpjpe(pred: &Frames, gt: &Frames, mode: Alignment) -> Result<Stat> {
    check_shapes(pred, gt, "joint positions")?;
    Ok(Stat::of(&per_frame_point_error(pred, gt, mode, None)?))
}

/// Mean vertex error (mm). Hip alignment needs the per-frame root joints
/// of prediction and ground truth.
pub fn mve(pred: &Frames, gt: &Frames, mode: Alignment, roots: Option<(&[Vec3], &[Vec3])>) -> Result<Stat> {
    check_shapes(pred, gt, "vertices")?;
    if mode == Alignment::HipAligned {
        let Some((rp, rg)) = roots else {
            return Err(Error::invalid("hip-aligned MVE needs root joints"));
        };
        if rp.len() != pred.len() || rg.len() != pred.len() {
            return Err(Error::invalid("root joints do not match the frame count"));
        }
    }
    Ok(Stat::of(&per_frame_point_error(pred, gt, mode, roots)?))
}

/// Geodesic angle (deg) between two rotations: arccos((tr(AᵀB) − 1)/2),
/// evaluated as atan2 of the sine and cosine parts so it stays accurate
/// near zero.
pub fn geodesic_deg(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    let c = m.trace() - 1.0;
    let s = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    s.atan2(c).to_degrees()
}

fn check_rotations(r: &[Vec<Rotation>]) -> Result<()> {
    for (t, f) in r.iter().enumerate() {
        for (j, rot) in f.iter().enumerate() {
            let m = rot.matrix();
            let err = (m.transpose() * m - crate::geom::Mat3::identity()).abs().max();
            if !(err < 1e-6) || !(m.determinant() > 0.0) {
                return Err(Error::invalid(format!("rotation of joint {j} at frame {t} is not orthonormal")));
            }
        }
    }
    Ok(())
}

/// Mean per-joint angular error (deg) over the joints in `subset` (all when
/// `None`). `Procrustes` pre-rotates each frame's predictions by the
/// rotation of the joint-position Procrustes fit, so `joints` is required.
pub fn mpjae(
    pred: &[Vec<Rotation>],
    gt: &[Vec<Rotation>],
    mode: Alignment,
    joints: Option<(&Frames, &Frames)>,
    subset: Option<&[usize]>,
) -> Result<Stat> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "rotation frames",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    check_rotations(pred)?;
    check_rotations(gt)?;
    let aligners: Option<Vec<SimilarityTransform>> = match mode {
        Alignment::Procrustes => {
            let (jp, jg) = joints.ok_or_else(|| Error::invalid("Procrustes MPJAE needs joint positions"))?;
            check_shapes(jp, jg, "joint positions")?;
            if jp.len() != pred.len() {
                return Err(Error::invalid("joint positions do not match the rotation frames"));
            }
            Some(jp.iter().zip(jg).map(|(p, g)| procrustes_align(p, g, true)).collect::<Result<_>>()?)
        }
        _ => None,
    };
    let mut per_frame = Vec::with_capacity(pred.len());
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::DimensionMismatch {
                what: "joint rotations",
                expected: g.len(),
                got: p.len(),
            });
        }
        let idx: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..p.len()).collect(),
        };
        if idx.is_empty() || idx.iter().any(|&j| j >= p.len()) {
            return Err(Error::invalid("joint subset is empty or out of range"));
        }
        let pre = aligners.as_ref().map(|a| a[t].rotation).unwrap_or_else(Rotation::identity);
        let e: f64 = idx.iter().map(|&j| geodesic_deg(&(pre * p[j]), &g[j])).sum();
        per_frame.push(e / idx.len() as f64);
    }
    Ok(Stat::of(&per_frame))
}

/// Third-difference jitter in units of 10 m·s⁻³, mean/std over per-frame
/// joint means.
pub fn jitter(joints: &Frames, fps: f64) -> Result<Stat> {
    if joints.len() < 4 {
        return Err(Error::invalid("jitter needs at least 4 frames"));
    }
    if !(fps > 0.0) {
        return Err(Error::invalid("fps must be positive"));
    }
    let j = joints[0].len();
    if j == 0 || joints.iter().any(|f| f.len() != j) {
        return Err(Error::invalid("inconsistent joint count"));
    }
    let f3 = fps.powi(3);
    let per: Vec<f64> = (3..joints.len())
        .map(|t| {
            (0..j)
                .map(|k| (joints[t][k] - joints[t - 1][k] * 3.0 + joints[t - 2][k] * 3.0 - joints[t - 3][k]).norm() * f3)
                .sum::<f64>()
                / j as f64
                / 10.0
        })
        .collect();
    Ok(Stat::of(&per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalErrors {
    /// mm.
    pub g_mpjpe: Stat,
    /// mm (present when vertices were given).
    pub g_mve: Option<Stat>,
    /// Acceleration error ‖Δ²pred − Δ²gt‖·fps², mm·s⁻².
    pub acceleration: Stat,
    pub windows: usize,
    /// Set when the sequence is shorter than one window.
    pub truncated: bool,
}

fn rigid_window_align(pred: &[Vec3], gt: &[Vec3]) -> Result<SimilarityTransform> {
    if pred.len() < 3 {
        let d = gt[0] - pred[0];
        return SimilarityTransform::new(1.0, Rotation::identity(), d);
    }
    procrustes_align(pred, gt, false)
}

/// Global errors over consecutive windows of `window_s` seconds. Each
/// window is rigidly aligned (no scale) on its first frame's joints and
/// left unaligned thereafter.
pub fn g_mpjpe(pred: &Frames, gt: &Frames, fps: f64, window_s: f64, vertices: Option<(&Frames, &Frames)>) -> Result<GlobalErrors> {
    check_shapes(pred, gt, "joint positions")?;
    if !(fps > 0.0) || !(window_s > 0.0) {
        return Err(Error::invalid("fps and window length must be positive"));
    }
    if let Some((vp, vg)) = vertices {
        check_shapes(vp, vg, "vertices")?;
        if vp.len() != pred.len() {
            return Err(Error::invalid("vertex frames do not match joint frames"));
        }
    }
    let w = ((fps * window_s).round() as usize).max(1);
    let truncated = pred.len() < w;
    let mut joint_err = Vec::with_capacity(pred.len());
    let mut vert_err = Vec::new();
    let mut accel = Vec::new();
    let mut windows = 0;
    for start in (0..pred.len()).step_by(w) {
        let end = (start + w).min(pred.len());
        windows += 1;
        let a = rigid_window_align(&pred[start], &gt[start])?;
        let aligned: Vec<Vec<Vec3>> = pred[start..end].iter().map(|f| a.apply_all(f)).collect();
        for (p, g) in aligned.iter().zip(&gt[start..end]) {
            joint_err.push(mean_distance(p, g) * 1e3);
        }
        if let Some((vp, vg)) = vertices {
            for (p, g) in vp[start..end].iter().zip(&vg[start..end]) {
                vert_err.push(mean_distance(&a.apply_all(p), g) * 1e3);
            }
        }
        for t in 1..aligned.len().saturating_sub(1) {
            let g = &gt[start..end];
            let e: f64 = (0..aligned[t].len())
                .map(|k| {
                    let ap = aligned[t + 1][k] - aligned[t][k] * 2.0 + aligned[t - 1][k];
                    let ag = g[t + 1][k] - g[t][k] * 2.0 + g[t - 1][k];
                    (ap - ag).norm()
                })
                .sum::<f64>()
                / aligned[t].len() as f64;
            accel.push(e * fps * fps * 1e3);
        }
    }
    Ok(GlobalErrors {
        g_mpjpe: Stat::of(&joint_err),
        g_mve: vertices.map(|_| Stat::of(&vert_err)),
        acceleration: Stat::of(&accel),
        windows,
        truncated,
    })
}

/// A sequence in the layout the report consumes.
#[derive(Debug, Clone, Default)]
pub struct EvalSequence {
    pub joints: Vec<Vec<Vec3>>,
    /// Global joint rotations.
    pub rotations: Vec<Vec<Rotation>>,
    pub vertices: Option<Vec<Vec<Vec3>>>,
}

impl EvalSequence {
    /// Joints, global rotations and (optionally) skinned vertices of `poses`.
    pub fn from_poses(model: &BodyModel, poses: &[PoseParams], with_vertices: bool) -> Result<Self> {
        let mut out = EvalSequence {
            vertices: with_vertices.then(Vec::new),
            ..Default::default()
        };
        for p in poses {
            let (j, r) = model.forward_kinematics(p)?;
            out.joints.push(j);
            out.rotations.push(r);
            if let Some(v) = &mut out.vertices {
                v.push(model.skin_mesh(p)?.vertices);
            }
        }
        Ok(out)
    }
}

/// `frame,mpjpe,mpjpe_pa,mpjae,mpjae_pa` rows, one per frame (mm, degrees).
pub fn per_frame_csv(pred: &EvalSequence, gt: &EvalSequence) -> Result<String> {
    let (jp, jg) = (pred.joints.as_slice(), gt.joints.as_slice());
    check_shapes(jp, jg, "joint positions")?;
    let raw = per_frame_point_error(jp, jg, Alignment::Raw, None)?;
    let pa = per_frame_point_error(jp, jg, Alignment::Procrustes, None)?;
    let mut out = String::from("frame,mpjpe,mpjpe_pa,mpjae,mpjae_pa\n");
    for t in 0..jp.len() {
        let r = std::slice::from_ref(&pred.rotations[t]);
        let g = std::slice::from_ref(&gt.rotations[t]);
        let joints = (&jp[t..=t], &jg[t..=t]);
        let a = mpjae(r, g, Alignment::Raw, None, None)?.mean;
        let a_pa = mpjae(r, g, Alignment::Procrustes, Some(joints), None)?.mean;
        out.push_str(&format!("{t},{},{},{a},{a_pa}\n", raw[t], pa[t]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: Stat,
    pub mpjpe_pa: Stat,
    pub mpjpe_hip: Stat,
    pub mve: Option<Stat>,
    pub mve_pa: Option<Stat>,
    pub mpjae: Stat,
    pub mpjae_pa: Stat,
    /// 10 m·s⁻³.
    pub jitter: Option<Stat>,
    pub global: Option<GlobalErrors>,
    /// Loop-closure drift of the predicted root track.
    pub drift: Option<LoopDrift>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "metric report".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "metric report".into(),
            detail: e.to_string(),
        })
    }

    /// `metric,mean,std` rows.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("mpjpe", Some(self.mpjpe)),
            ("mpjpe_pa", Some(self.mpjpe_pa)),
            ("mpjpe_hip", Some(self.mpjpe_hip)),
            ("mve", self.mve),
            ("mve_pa", self.mve_pa),
            ("mpjae", Some(self.mpjae)),
            ("mpjae_pa", Some(self.mpjae_pa)),
            ("jitter", self.jitter),
        ];
        if let Some(g) = &self.global {
            rows.push(("g_mpjpe", Some(g.g_mpjpe)));
            rows.push(("g_mve", g.g_mve));
            rows.push(("acceleration", Some(g.acceleration)));
        }
        let mut out = String::from("metric,mean,std\n");
        for (name, s) in rows {
            if let Some(s) = s {
                out.push_str(&format!("{name},{},{}\n", s.mean, s.std));
            }
        }
        if let Some(d) = &self.drift {
            out.push_str(&format!("drift_m,{},\ndrift_fraction,{},\n", d.drift, d.fraction));
        }
        out
    }
}

/// Full report. Global metrics are computed when the sequence spans at
/// least `min(window, length)`; jitter when it has ≥ 4 frames.
pub fn evaluate(pred: &EvalSequence, gt: &EvalSequence, fps: f64) -> Result<MetricReport> {
    let jp = (pred.joints.as_slice(), gt.joints.as_slice());
    let (mve, mve_pa) = match (&pred.vertices, &gt.vertices) {
        (Some(vp), Some(vg)) => (Some(mve(vp, vg, Alignment::Raw, None)?), Some(mve(vp, vg, Alignment::Procrustes, None)?)),
        _ => (None, None),
    };
    let vertices = match (&pred.vertices, &gt.vertices) {
        (Some(vp), Some(vg)) => Some((vp.as_slice(), vg.as_slice())),
        _ => None,
    };
    let roots: Vec<Vec3> = pred.joints.iter().map(|f| f[0]).collect();
    Ok(MetricReport {
        mpjpe: mpjpe(jp.0, jp.1, Alignment::Raw)?,
        mpjpe_pa: mpjpe(jp.0, jp.1, Alignment::Procrustes)?,
        mpjpe_hip: mpjpe(jp.0, jp.1, Alignment::HipAligned)?,
        mve,
        mve_pa,
        mpjae: mpjae(&pred.rotations, &gt.rotations, Alignment::Raw, None, None)?,
        mpjae_pa: mpjae(&pred.rotations, &gt.rotations, Alignment::Procrustes, Some(jp), None)?,
        jitter: if pred.joints.len() >= 4 { Some(jitter(jp.0, fps)?) } else { None },
        global: Some(g_mpjpe(jp.0, jp.1, fps, 10.0, vertices)?),
        drift: if roots.len() >= 2 { Some(loop_closure_drift(&roots)?) } else { None },
    })
}
