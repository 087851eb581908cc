use log::warn;
use serde::{Deserialize, Serialize};

use super::source::em_to_world;
use crate::body::{anchor_frame, SensorAnchor};
use crate::error::{Error, Result};
use crate::geom::{Mat3, RigidTransform, Rotation, TriangleMesh, Vec3};
use crate::body::BodyModel;
use crate::synth::em::SensorFrameSet;
use crate::synth::SkinCalibrationData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinOffset {
    pub sensor_id: usize,
    /// v_s.
    pub v: Vec3,
    /// Q_s.
    #[serde(rename = "Q")]
    pub q: Rotation,
    /// Summed objective for this sensor.
    pub residual: f64,
}

impl SkinOffset {
    pub fn apply(&self, anchor: &SensorAnchor) -> SensorAnchor {
        anchor.clone().with_offset(self.q, self.v)
    }
}

/// Per-sensor fit of `(v_s, Q_s)` against world-frame measurements.
///
/// The objective separates: `v` only enters the position term and `Q` only
/// the rotation term, and both minimisers are closed form
/// (`v = mean R̃ᵀ(p − p̃)`, `Q = proj Σ R̃ᵀR`), so no iterative solver is
/// needed.
pub fn solve_skin_offsets(
    meshes: &[TriangleMesh],
    anchors: &[SensorAnchor],
    measurements: &[Vec<RigidTransform>],
) -> Result<Vec<SkinOffset>> {
    if meshes.is_empty() {
        return Err(Error::invalid("no registered meshes"));
    }
    if meshes.len() < 3 {
        warn!("skin calibration from only {} frame(s)", meshes.len());
    }
    if measurements.len() != anchors.len() {
        return Err(Error::DimensionMismatch {
            what: "measurement tracks",
            expected: anchors.len(),
            got: measurements.len(),
        });
    }
    anchors
        .iter()
        .zip(measurements)
        .map(|(anchor, track)| {
            if track.len() != meshes.len() {
                return Err(Error::DimensionMismatch {
                    what: "measurements per sensor",
                    expected: meshes.len(),
                    got: track.len(),
                });
            }
            let mut frames = Vec::with_capacity(meshes.len());
            for m in meshes {
                anchor.validate(m)?;
                frames.push(anchor_frame(&m.vertices, &m.faces, anchor)?);
            }
            let mut v = Vec3::zeros();
            let mut acc = Mat3::zeros();
            for (fr, meas) in frames.iter().zip(track) {
                v += fr.rotation.transpose().rotate(&(meas.translation - fr.position));
                acc += fr.rotation.matrix().transpose() * meas.rotation.matrix();
            }
            v /= frames.len() as f64;
            let q = Rotation::project(&acc);
            let residual = frames
                .iter()
                .zip(track)
                .map(|(fr, meas)| {
                    let p = fr.position + fr.rotation.rotate(&v);
                    let r = fr.rotation * q;
                    (meas.translation - p).norm_squared() + r.frobenius_sq(&meas.rotation)
                })
                .sum();
            Ok(SkinOffset {
                sensor_id: anchor.sensor_id,
                v,
                q,
                residual,
            })
        })
        .collect()
}

/// World-frame measurements for skin calibration: every EM sensor mapped
/// through the calibrated source, with the source itself last (its world
/// pose is the EM origin).
pub fn skin_measurements(
    em: &SensorFrameSet,
    sensor_ids: &[usize],
    source_tag: &[RigidTransform],
    source_offset: &RigidTransform,
) -> Result<Vec<Vec<RigidTransform>>> {
    if source_tag.len() != em.len() {
        return Err(Error::DimensionMismatch {
            what: "source tag frames",
            expected: em.len(),
            got: source_tag.len(),
        });
    }
    let mut out: Vec<Vec<RigidTransform>> = vec![Vec::with_capacity(em.len()); sensor_ids.len() + 1];
    for (f, tag) in source_tag.iter().enumerate() {
        for (k, id) in sensor_ids.iter().enumerate() {
            let r = em
                .reading(f, *id)
                .ok_or_else(|| Error::invalid(format!("frame {f}: no reading for sensor {id}")))?;
            out[k].push(em_to_world(tag, source_offset, &r.pose()));
        }
        out[sensor_ids.len()].push(em_to_world(tag, source_offset, &RigidTransform::identity()));
    }
    Ok(out)
}

/// Skin offsets of every sensor and of the source from a recorded session
/// with registered poses. The source's offset comes last.
pub fn calibrate_skin_session(
    model: &BodyModel,
    session: &SkinCalibrationData,
    anchors: &[SensorAnchor],
    source: &SensorAnchor,
    source_offset: &RigidTransform,
) -> Result<Vec<SkinOffset>> {
    if session.poses.len() != session.em.len() {
        return Err(Error::DimensionMismatch {
            what: "registered poses",
            expected: session.em.len(),
            got: session.poses.len(),
        });
    }
    let ids: Vec<usize> = anchors.iter().map(|a| a.sensor_id).collect();
    let meas = skin_measurements(&session.em, &ids, &session.source_tag, source_offset)?;
    let meshes = session
        .poses
        .iter()
        .map(|p| model.skin_mesh(p))
        .collect::<Result<Vec<_>>>()?;
    let mut all = anchors.to_vec();
    all.push(source.clone());
    solve_skin_offsets(&meshes, &all, &meas)
}
