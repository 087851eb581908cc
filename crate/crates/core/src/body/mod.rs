//! Parametric articulated body: kinematics, skinning, keypoints, sensor
//! anchors and the toy humanoid that stands in for SMPL assets.

pub mod kinematics;
pub mod model;
pub mod pose;
pub mod sensor;
pub mod toy;

pub use kinematics::{joint_limit_penalty, joint_limit_penalty_grad, PoseGradient, PoseState, ShapedBody};
pub use model::{BodyModel, BodyModelAsset, BodyModelParts, SparseRow};
pub use pose::{layout, PoseGroups, PoseParams};
pub use sensor::{anchor_frame, virtual_sensor, virtual_sensor_backward, AnchorFrame, SensorAnchor};
pub use toy::build_toy_humanoid;
