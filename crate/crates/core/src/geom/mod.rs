//! Rotation algebra, rigid and similarity transforms, robust penalties and
//! mesh distance queries.

pub mod mesh;
pub mod procrustes;
pub mod robust;
pub mod rotation;
pub mod transform;

pub use mesh::{closest_point_on_triangle, point_to_mesh_sq_distance, ClosestPoint, Feature, MeshBvh, TriangleMesh};
pub use procrustes::{alignment_residual, procrustes_align};
pub use robust::{geman_mcclure, geman_mcclure_sq, robustifier, Robustifier};
pub use rotation::{exp_jacobian, exp_vjp, quaternion_sign_continuity, skew, Mat3, Rotation, Vec3};
pub use transform::{apply_offset, invert_offset, RigidTransform, SimilarityTransform};
