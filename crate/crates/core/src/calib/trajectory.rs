use serde::{Deserialize, Serialize};

use super::chain::{offset_as_transform, transform_as_offset, ChainProblem, ChainTerm, PointTerm};
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};

pub const MIN_TRACK_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAlignment {
    /// `T^{i→W}`.
    pub world_transform: RigidTransform,
    /// `(t_o, R_o)` from the device pose to its tag.
    pub tag_offset: RigidTransform,
    /// Metres, per frame.
    pub position_residuals: Vec<f64>,
    /// Degrees, per frame.
    pub angle_residuals: Vec<f64>,
    pub objective: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

impl TrajectoryAlignment {
    pub fn position_stats(&self) -> (f64, f64) {
        mean_std(&self.position_residuals)
    }

    pub fn angle_stats(&self) -> (f64, f64) {
        mean_std(&self.angle_residuals)
    }

    /// Device pose mapped into the world and through the tag offset.
    pub fn predict_tag(&self, device: &RigidTransform) -> RigidTransform {
        self.world_transform.compose(device).compose(&offset_as_transform(&self.tag_offset))
    }
}

fn check_tracks(device_track: &[RigidTransform], tag_track: &[RigidTransform]) -> Result<()> {
    if device_track.len() != tag_track.len() {
        return Err(Error::DimensionMismatch {
            what: "tag track",
            expected: device_track.len(),
            got: tag_track.len(),
        });
    }
    if device_track.len() < MIN_TRACK_FRAMES {
        return Err(Error::UnderConstrained(format!(
            "{} frames; need ≥ {MIN_TRACK_FRAMES}",
            device_track.len()
        )));
    }
    Ok(())
}

fn pose_problem(device_track: &[RigidTransform], tag_track: &[RigidTransform]) -> ChainProblem {
    ChainProblem {
        terms: device_track
            .iter()
            .zip(tag_track)
            .map(|(d, t)| ChainTerm {
                a: RigidTransform::identity(),
                b: *d,
                c: *t,
                group: 0,
            })
            .collect(),
        points: Vec::new(),
        groups: 1,
        point_weight: 1.0,
    }
}

fn finish(device_track: &[RigidTransform], tag_track: &[RigidTransform], x: RigidTransform, y: RigidTransform, objective: f64) -> TrajectoryAlignment {
    let mut out = TrajectoryAlignment {
        world_transform: x,
        tag_offset: transform_as_offset(&y),
        position_residuals: Vec::with_capacity(device_track.len()),
        angle_residuals: Vec::with_capacity(device_track.len()),
        objective,
    };
    for (d, t) in device_track.iter().zip(tag_track) {
        let p = out.predict_tag(d);
        out.position_residuals.push((p.translation - t.translation).norm());
        out.angle_residuals.push(p.rotation.angle_to(&t.rotation).to_degrees());
    }
    out
}

/// Aligns a self-localised device trajectory with a tag tracked in the world.
pub fn align_camera_trajectory(device_track: &[RigidTransform], tag_track: &[RigidTransform]) -> Result<TrajectoryAlignment> {
    check_tracks(device_track, tag_track)?;
    let sol = pose_problem(device_track, tag_track).solve()?;
    Ok(finish(device_track, tag_track, sol.x, sol.ys[0], sol.objective))
}

/// As [`align_camera_trajectory`], with an extra term pulling the
/// device-frame root trajectory onto the world-frame one. Returns the
/// per-frame root distances after alignment.
pub fn align_root_trajectory(
    device_root: &[Vec3],
    world_root: &[Vec3],
    device_track: &[RigidTransform],
    tag_track: &[RigidTransform],
) -> Result<(TrajectoryAlignment, Vec<f64>)> {
    check_tracks(device_track, tag_track)?;
    if device_root.len() != world_root.len() || device_root.len() != device_track.len() {
        return Err(Error::DimensionMismatch {
            what: "root trajectories",
            expected: device_track.len(),
            got: device_root.len().min(world_root.len()),
        });
    }
    let mut problem = pose_problem(device_track, tag_track);
    problem.points = device_root
        .iter()
        .zip(world_root)
        .map(|(b, c)| PointTerm {
            a: RigidTransform::identity(),
            b: *b,
            c: *c,
        })
        .collect();
    let sol = problem.solve()?;
    let alignment = finish(device_track, tag_track, sol.x, sol.ys[0], sol.objective);
    let distances = device_root
        .iter()
        .zip(world_root)
        .map(|(r, w)| (alignment.world_transform.apply(r) - w).norm())
        .collect();
    Ok((alignment, distances))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopDrift {
    pub drift: f64,
    pub path_length: f64,
    pub fraction: f64,
}

pub fn loop_closure_drift(root_track: &[Vec3]) -> Result<LoopDrift> {
    if root_track.len() < 2 {
        return Err(Error::invalid("drift needs at least two frames"));
    }
    let drift = (root_track[root_track.len() - 1] - root_track[0]).norm();
    let path_length: f64 = root_track.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let fraction = if path_length > 0.0 { drift / path_length } else { 0.0 };
    Ok(LoopDrift {
        drift,
        path_length,
        fraction,
    })
}

/// Integer lag `d` maximising the normalised cross-correlation
/// `Σ_k a[k + d]·b[k]` of the z-scored signals over `|d| ≤ max_lag`, i.e.
/// the clap in `audio_energy` at index `k` appears in `em_accel` at
/// `k + d`.
pub fn sync_by_clap(em_accel: &[f64], audio_energy: &[f64], max_lag: usize) -> Result<i64> {
    let z = |x: &[f64]| -> Result<Vec<f64>> {
        let (m, s) = mean_std(x);
        if !(s > 0.0) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("sync signal is constant or non-finite".into()));
        }
        Ok(x.iter().map(|v| (v - m) / s).collect())
    };
    let a = z(em_accel)?;
    let b = z(audio_energy)?;
    let max_lag = max_lag.min(a.len().max(b.len())) as i64;
    let mut best = (f64::MIN, 0i64);
    for d in -max_lag..=max_lag {
        let (mut acc, mut n) = (0.0, 0usize);
        for (k, bk) in b.iter().enumerate() {
            let i = k as i64 + d;
            if i >= 0 && (i as usize) < a.len() {
                acc += a[i as usize] * bk;
                n += 1;
            }
        }
        if n > 0 && acc / n as f64 > best.0 {
            best = (acc / n as f64, d);
        }
    }
    Ok(best.1)
}
