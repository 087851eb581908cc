use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Rotation, Vec3};

/// Measurement noise levels. Position sigmas are 3D RMS values (each axis
/// gets `σ/√3`); rotation sigmas are RMS angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub em_pos_sigma: f64,
    pub em_rot_sigma: f64,
    pub kp_pixel_sigma: f64,
    pub kp_dropout_prob: f64,
    pub kp_outlier_prob: f64,
    pub depth_sigma: f64,
    pub camera_pos_sigma: f64,
    pub camera_rot_sigma: f64,
    pub tag_pos_sigma: f64,
    pub tag_rot_sigma: f64,
    /// EM stream lag in frames; may be fractional.
    pub time_offset: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            em_pos_sigma: 0.01,
            em_rot_sigma: 2.5,
            kp_pixel_sigma: 2.0,
            kp_dropout_prob: 0.05,
            kp_outlier_prob: 0.02,
            depth_sigma: 0.005,
            camera_pos_sigma: 0.018,
            camera_rot_sigma: 0.4,
            tag_pos_sigma: 0.001,
            tag_rot_sigma: 0.1,
            time_offset: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            em_pos_sigma: 0.0,
            em_rot_sigma: 0.0,
            kp_pixel_sigma: 0.0,
            kp_dropout_prob: 0.0,
            kp_outlier_prob: 0.0,
            depth_sigma: 0.0,
            camera_pos_sigma: 0.0,
            camera_rot_sigma: 0.0,
            tag_pos_sigma: 0.0,
            tag_rot_sigma: 0.0,
            time_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("em_pos_sigma", self.em_pos_sigma),
            ("em_rot_sigma", self.em_rot_sigma),
            ("kp_pixel_sigma", self.kp_pixel_sigma),
            ("depth_sigma", self.depth_sigma),
            ("camera_pos_sigma", self.camera_pos_sigma),
            ("camera_rot_sigma", self.camera_rot_sigma),
            ("tag_pos_sigma", self.tag_pos_sigma),
            ("tag_rot_sigma", self.tag_rot_sigma),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        for (name, p) in [("kp_dropout_prob", self.kp_dropout_prob), ("kp_outlier_prob", self.kp_outlier_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !self.time_offset.is_finite() {
            return Err(Error::invalid("time_offset must be finite"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian displacement with 3D RMS `sigma`.
pub fn position_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    let s = sigma / 3f64.sqrt();
    Vec3::new(
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
    )
}

/// Uniformly distributed unit vector.
pub fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotation about a random axis by an angle drawn from `N(0, sigma)`
/// (radians).
pub fn rotation_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Rotation {
    if sigma == 0.0 {
        return Rotation::identity();
    }
    let axis = random_axis(rng);
    let angle = Normal::new(0.0, sigma).expect("sigma is finite").sample(rng);
    Rotation::from_axis_angle(&(axis * angle))
}

/// Uniformly random rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    Rotation::from_quaternion(&nalgebra::UnitQuaternion::from_quaternion(q))
}
