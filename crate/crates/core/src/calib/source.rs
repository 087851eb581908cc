use serde::{Deserialize, Serialize};

use super::chain::{offset_as_transform, transform_as_offset, ChainProblem, ChainTerm};
use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::synth::em::offset_pose;

/// Tracks recorded for the EM-to-world calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTracks {
    /// `[s][t]`: EM-local pose of calibration sensor `s + 1`.
    pub em_local: Vec<Vec<RigidTransform>>,
    /// `[s][t]`: world pose of tag `s`; tag 0 sits on the source.
    pub tags: Vec<Vec<RigidTransform>>,
}

impl SourceTracks {
    pub fn sensor_count(&self) -> usize {
        self.em_local.len()
    }

    pub fn frame_count(&self) -> usize {
        self.tags.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tags.len() != self.em_local.len() + 1 {
            return Err(Error::DimensionMismatch {
                what: "tag tracks (sensors + source)",
                expected: self.em_local.len() + 1,
                got: self.tags.len(),
            });
        }
        let t = self.frame_count();
        if self.em_local.iter().chain(&self.tags).any(|s| s.len() != t) {
            return Err(Error::invalid("calibration tracks are not synchronised"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCalibration {
    /// `(t_o, R_o)` per tag; index 0 maps the source tag to the EM origin.
    pub offsets: Vec<RigidTransform>,
    /// Summed objective at the solution.
    pub residual: f64,
    pub position_rms: f64,
    pub angle_rms_deg: f64,
}

impl SourceCalibration {
    pub fn source_offset(&self) -> &RigidTransform {
        &self.offsets[0]
    }
}

/// World pose of the EM origin from the tracked source tag.
pub fn em_origin(source_tag: &RigidTransform, source_offset: &RigidTransform) -> RigidTransform {
    offset_pose(source_tag, source_offset)
}

/// Maps an EM-local pose into the world.
pub fn em_to_world(source_tag: &RigidTransform, source_offset: &RigidTransform, local: &RigidTransform) -> RigidTransform {
    em_origin(source_tag, source_offset).compose(local)
}

pub const MIN_SENSORS: usize = 2;
pub const MIN_FRAMES: usize = 30;

/// Jointly estimates the source-tag offset and one tag offset per sensor.
pub fn solve_source_offsets(tracks: &SourceTracks) -> Result<SourceCalibration> {
    tracks.validate()?;
    let s = tracks.sensor_count();
    let t = tracks.frame_count();
    if s < MIN_SENSORS || t < MIN_FRAMES {
        return Err(Error::UnderConstrained(format!(
            "{s} sensors × {t} frames; need ≥ {MIN_SENSORS} sensors and ≥ {MIN_FRAMES} frames"
        )));
    }
    let mut problem = ChainProblem {
        groups: s,
        ..ChainProblem::default()
    };
    for (k, local) in tracks.em_local.iter().enumerate() {
        for f in 0..t {
            problem.terms.push(ChainTerm {
                a: tracks.tags[0][f],
                b: local[f],
                c: tracks.tags[k + 1][f],
                group: k,
            });
        }
    }
    let sol = problem.solve()?;
    let mut offsets = vec![transform_as_offset(&sol.x)];
    offsets.extend(sol.ys.iter().map(transform_as_offset));
    let (pos, ang) = residual_rms(tracks, &offsets);
    Ok(SourceCalibration {
        offsets,
        residual: sol.objective,
        position_rms: pos,
        angle_rms_deg: ang,
    })
}

/// RMS position (m) and angle (deg) error of every predicted sensor tag.
pub fn residual_rms(tracks: &SourceTracks, offsets: &[RigidTransform]) -> (f64, f64) {
    let (mut p, mut a, mut n) = (0.0, 0.0, 0usize);
    let x = offset_as_transform(&offsets[0]);
    for (k, local) in tracks.em_local.iter().enumerate() {
        let y = offset_as_transform(&offsets[k + 1]);
        for (f, l) in local.iter().enumerate() {
            let pred = tracks.tags[0][f].compose(&x).compose(l).compose(&y);
            let obs = &tracks.tags[k + 1][f];
            p += (pred.translation - obs.translation).norm_squared();
            a += pred.rotation.angle_to(&obs.rotation).to_degrees().powi(2);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    ((p / n).sqrt(), (a / n).sqrt())
}
