//! Rigid-offset calibration and trajectory alignment.

mod chain;
pub mod skin;
pub mod source;
pub mod trajectory;

use serde::{Deserialize, Serialize};

pub use skin::{calibrate_skin_session, skin_measurements, solve_skin_offsets, SkinOffset};
pub use source::{em_origin, em_to_world, solve_source_offsets, SourceCalibration, SourceTracks};
pub use trajectory::{
    align_camera_trajectory, align_root_trajectory, loop_closure_drift, mean_std, rms, sync_by_clap, LoopDrift,
    TrajectoryAlignment,
};

use crate::body::SensorAnchor;
use crate::error::{Error, Result};
use crate::geom::RigidTransform;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationResiduals {
    pub source: Option<f64>,
    pub source_position_rms: Option<f64>,
    pub source_angle_rms_deg: Option<f64>,
    pub skin: Vec<f64>,
    pub camera_position_mean: Option<f64>,
    pub camera_angle_mean_deg: Option<f64>,
    pub root_distance_mean: Option<f64>,
}

/// On-disk calibration: source offsets (index 0 is the source tag), skin
/// offsets and residual report. `beta` is the registered subject shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationFile {
    pub source_offsets: Vec<RigidTransform>,
    pub skin_offsets: Vec<SkinOffset>,
    pub residuals: CalibrationResiduals,
    pub beta: Option<Vec<f64>>,
    /// Device world → EM world, from the device tag.
    pub camera: Option<TrajectoryAlignment>,
    /// As `camera`, additionally pulling the fitted root track onto a
    /// world-frame root track.
    pub root: Option<TrajectoryAlignment>,
}

impl CalibrationFile {
    pub fn source_offset(&self) -> Result<&RigidTransform> {
        self.source_offsets
            .first()
            .ok_or_else(|| Error::invalid("calibration has no source offset"))
    }

    /// Applies the skin offsets to matching anchors (by sensor id).
    pub fn calibrated_anchors(&self, anchors: &[SensorAnchor]) -> Result<Vec<SensorAnchor>> {
        anchors
            .iter()
            .map(|a| {
                self.skin_offsets
                    .iter()
                    .find(|o| o.sensor_id == a.sensor_id)
                    .map(|o| o.apply(a))
                    .ok_or_else(|| Error::invalid(format!("no skin offset for sensor {}", a.sensor_id)))
            })
            .collect()
    }
}
