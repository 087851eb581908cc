use nalgebra::{DMatrix, UnitQuaternion};
use rayon::prelude::*;

use super::Stage3Config;
use crate::body::PoseParams;
use crate::error::{Error, Result};
use crate::geom::{quaternion_sign_continuity, Rotation, Vec3};

/// Per-frame dense refinement run after smoothing. It should minimise its
/// own data terms plus `λ_reg‖θ − θ^S2‖²`, keeping close to the Stage 2
/// pose it is given.
pub trait PoseRefiner: Sync {
    fn refine(&self, frame: usize, smoothed: &PoseParams, s2: &PoseParams, lambda_reg: f64) -> Result<PoseParams>;
}

/// Savitzky–Golay weights: row `i` evaluates the least-squares polynomial
/// through a window of samples at offset `i − half`.
fn savgol_weights(window: usize, order: usize) -> Result<DMatrix<f64>> {
    let half = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |i, k| (i as f64 - half).powi(k as i32));
    let ata_inv = (a.transpose() * &a)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("Savitzky–Golay normal matrix is singular".into()))?;
    Ok(&a * ata_inv * a.transpose())
}

/// Savitzky–Golay smoothing of a uniformly sampled series. The first and
/// last `window / 2` samples take the value of the polynomial fitted to the
/// first or last full window.
pub fn savgol_filter(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= order {
        return Err(Error::invalid(format!("invalid Savitzky–Golay window {window} for order {order}")));
    }
    let n = series.len();
    if n < window {
        return Err(Error::invalid(format!("series of {n} samples is shorter than the window {window}")));
    }
    let w = savgol_weights(window, order)?;
    let half = window / 2;
    let apply = |row: usize, start: usize| (0..window).map(|j| w[(row, j)] * series[start + j]).sum::<f64>();
    Ok((0..n)
        .map(|i| {
            if i < half {
                apply(i, 0)
            } else if i + half >= n {
                apply(i + window - n, n - window)
            } else {
                apply(half, i - half)
            }
        })
        .collect())
}

/// Smooths translation directly and every joint rotation (root included) as
/// a sign-continuous quaternion, renormalised afterwards. Returns whether
/// filtering happened: shorter sequences come back unchanged.
pub(crate) fn smooth(poses: &[PoseParams], cfg: &Stage3Config) -> Result<(Vec<PoseParams>, bool)> {
    cfg.validate()?;
    let n = poses.len();
    if n < cfg.window {
        log::warn!("sequence of {n} frames is shorter than the smoothing window {}; left unfiltered", cfg.window);
        return Ok((poses.to_vec(), false));
    }
    let joints = poses[0].theta_b.len() + 1;
    if poses.iter().any(|p| p.theta_b.len() + 1 != joints) {
        return Err(Error::invalid("poses differ in joint count"));
    }
    let rotation = |p: &PoseParams, j: usize| if j == 0 { p.theta_r } else { p.theta_b[j - 1] };

    let rotations: Vec<Vec<Vec3>> = (0..joints)
        .into_par_iter()
        .map(|j| {
            let q: Vec<UnitQuaternion<f64>> = poses.iter().map(|p| Rotation::from_axis_angle(&rotation(p, j)).to_quaternion()).collect();
            let q = quaternion_sign_continuity(&q)?;
            let mut coords = Vec::with_capacity(4);
            for c in 0..4 {
                let s: Vec<f64> = q.iter().map(|q| q.coords[c]).collect();
                coords.push(savgol_filter(&s, cfg.window, cfg.order)?);
            }
            (0..n)
                .map(|t| {
                    let v = nalgebra::Vector4::new(coords[0][t], coords[1][t], coords[2][t], coords[3][t]);
                    let q = nalgebra::Quaternion::from(v);
                    if !(q.norm() > 1e-9) {
                        return Err(Error::NonFinite(format!("smoothed quaternion of joint {j} vanished at frame {t}")));
                    }
                    Ok(Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)).to_axis_angle())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let translation: Vec<Vec<f64>> = (0..3)
        .into_par_iter()
        .map(|k| savgol_filter(&poses.iter().map(|p| p.t[k]).collect::<Vec<_>>(), cfg.window, cfg.order))
        .collect::<Result<_>>()?;

    let out = (0..n)
        .map(|t| PoseParams {
            theta_r: rotations[0][t],
            theta_b: (1..joints).map(|j| rotations[j][t]).collect(),
            t: Vec3::new(translation[0][t], translation[1][t], translation[2][t]),
            beta: poses[t].beta.clone(),
        })
        .collect();
    Ok((out, true))
}

/// Smoothed Stage 2 poses.
pub fn stage3(s2: &[PoseParams], cfg: &Stage3Config) -> Result<Vec<PoseParams>> {
    Ok(smooth(s2, cfg)?.0)
}

/// Smoothing followed by a per-frame refiner.
pub fn stage3_refined(s2: &[PoseParams], cfg: &Stage3Config, refiner: &dyn PoseRefiner) -> Result<Vec<PoseParams>> {
    let smoothed = stage3(s2, cfg)?;
    smoothed
        .par_iter()
        .zip(s2)
        .enumerate()
        .map(|(t, (s, o))| refiner.refine(t, s, o, cfg.lambda_reg))
        .collect()
}
