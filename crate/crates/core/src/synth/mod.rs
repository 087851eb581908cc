//! Synthetic captures with known ground truth.

pub mod camera;
pub mod em;
pub mod motion;
pub mod multiview;
pub mod noise;
pub mod scenario;

pub use camera::{follow_camera, simulate_camera, simulate_camera_with, Camera, CaptureFrame, Keypoint2D};
pub use em::{simulate_em, simulate_tag_track, SensorFrameSet, SensorReading};
pub use motion::{generate_motion, inject_drift, MotionStyle};
pub use multiview::{observe_multiview, ring_rig};
pub use noise::NoiseSpec;
pub use scenario::{simulate_capture, ScenarioConfig, SkinCalibrationData, SyntheticCapture};
