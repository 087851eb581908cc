//! Smooth ground-truth motions for the toy humanoid.
//!
//! Every channel is a finite sum of sinusoids (or an eased closed curve for
//! the root path), so sequences are C^∞ in time and stay inside the joint
//! limits of [`crate::body::toy`].

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseParams};
use crate::error::{Error, Result};
use crate::geom::{Rotation, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionStyle {
    WalkCircle,
    RangeOfMotion,
    LoopClosure,
}

impl FromStr for MotionStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk_circle" => Ok(MotionStyle::WalkCircle),
            "range_of_motion" => Ok(MotionStyle::RangeOfMotion),
            "loop_closure" => Ok(MotionStyle::LoopClosure),
            other => Err(Error::invalid(format!(
                "unknown motion style '{other}' (expected walk_circle, range_of_motion or loop_closure)"
            ))),
        }
    }
}

/// `a · sin(2π f t + φ)`.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amp * (TAU * self.freq * t + self.phase).sin()
    }
}

struct Channel {
    base: f64,
    waves: Vec<Wave>,
}

impl Channel {
    fn at(&self, t: f64) -> f64 {
        self.base + self.waves.iter().map(|w| w.at(t)).sum::<f64>()
    }
}

/// Per-joint, per-axis motion channels; locked axes stay empty.
fn body_channels(model: &BodyModel, style: MotionStyle, gait_hz: f64, rng: &mut ChaCha8Rng) -> Vec<[Channel; 3]> {
    let nj = model.joint_count();
    let locked = model.locked_axes();
    let (scale, jitter) = match style {
        MotionStyle::RangeOfMotion => (1.6, 0.12),
        _ => (1.0, 0.05),
    };
    let freq = match style {
        MotionStyle::RangeOfMotion => 0.35,
        _ => gait_hz,
    };
    let w = |amp: f64, phase: f64| Wave {
        amp: amp * scale,
        freq,
        phase,
    };
    let mut out = Vec::with_capacity(nj - 1);
    for j in 1..nj {
        let mut ch: [Channel; 3] = std::array::from_fn(|_| Channel {
            base: 0.0,
            waves: Vec::new(),
        });
        let side = if matches!(j, 1 | 4 | 7 | 16 | 18) { 1.0 } else { -1.0 };
        match j {
            1 | 2 => ch[0].waves.push(w(0.35, if side > 0.0 { 0.0 } else { 0.5 * TAU })),
            4 | 5 => {
                // Knees only flex positively.
                ch[0].base = 0.4 * scale;
                ch[0].waves.push(w(0.25, if side > 0.0 { 0.25 * TAU } else { 0.75 * TAU }));
            }
            7 | 8 => ch[0].waves.push(w(0.12, if side > 0.0 { 0.1 * TAU } else { 0.6 * TAU })),
            9 => ch[1].waves.push(w(0.08, 0.0)),
            15 => ch[1].waves.push(w(0.05, 0.3)),
            16 | 17 => {
                ch[2].base = -side * 1.15;
                ch[0].waves.push(w(0.25, if side > 0.0 { 0.5 * TAU } else { 0.0 }));
            }
            18 | 19 => {
                ch[1].base = -side * 0.45 * scale;
                ch[1].waves.push(w(0.15 * side, 0.5 * TAU));
            }
            _ => {}
        }
        for (axis, c) in ch.iter_mut().enumerate() {
            if locked[3 * (j - 1) + axis] {
                c.base = 0.0;
                c.waves.clear();
                continue;
            }
            if matches!(j, 4 | 5 | 18 | 19) {
                // One-sided limits: keep the random part well inside them.
                continue;
            }
            for _ in 0..2 {
                c.waves.push(Wave {
                    amp: jitter * rng.random_range(0.2..1.0),
                    freq: rng.random_range(0.15..0.6),
                    phase: rng.random_range(0.0..TAU),
                });
            }
        }
        out.push(ch);
    }
    out
}

fn clamp_to_limits(model: &BodyModel, theta_b: &mut [Vec3]) {
    for (i, th) in theta_b.iter_mut().enumerate() {
        let lim = model.joint_limit(i + 1);
        for k in 0..3 {
            th[k] = th[k].clamp(lim[k].0, lim[k].1);
        }
    }
}

/// Generates `round(duration · fps)` poses (β = 0) in a `+y`-up world.
pub fn generate_motion(model: &BodyModel, duration: f64, fps: u32, style: MotionStyle, seed: u64) -> Result<Vec<PoseParams>> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    if fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    let n = (duration * fps as f64).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration · fps rounds to zero frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gait_hz = rng.random_range(0.8..1.0);
    let channels = body_channels(model, style, gait_hz, &mut rng);
    let sway = [
        Wave {
            amp: 0.04,
            freq: gait_hz,
            phase: rng.random_range(0.0..TAU),
        },
        Wave {
            amp: 0.03,
            freq: 0.5 * gait_hz,
            phase: rng.random_range(0.0..TAU),
        },
    ];
    let bob = Wave {
        amp: 0.015,
        freq: 2.0 * gait_hz,
        phase: 0.0,
    };

    let radius = rng.random_range(1.3..1.7);
    let speed = rng.random_range(0.6..0.8);
    let (ellipse_a, ellipse_b) = (rng.random_range(1.6..2.2), rng.random_range(1.0..1.4));
    let turn = Wave {
        amp: 0.6,
        freq: 0.1,
        phase: 0.0,
    };

    let last = (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / fps as f64;
        // Root path position and heading (yaw about +y; yaw 0 faces +z).
        let (pos, heading) = match style {
            MotionStyle::WalkCircle => {
                let a = speed / radius * t;
                (Vec3::new(radius * (1.0 - a.cos()), 0.0, radius * a.sin()), a)
            }
            MotionStyle::RangeOfMotion => (Vec3::new(0.05 * (TAU * 0.1 * t).sin(), 0.0, 0.0), turn.at(t)),
            MotionStyle::LoopClosure => {
                // Eased so the path starts and ends at rest at the same point.
                let tau = k as f64 / last;
                let s = tau - (TAU * tau).sin() / TAU;
                let a = TAU * s;
                let pos = Vec3::new(ellipse_a * (1.0 - a.cos()), 0.0, ellipse_b * a.sin());
                let tangent = Vec3::new(ellipse_a * a.sin(), 0.0, ellipse_b * a.cos());
                (pos, tangent.x.atan2(tangent.z))
            }
        };
        // The loop-closure walk starts and ends standing still.
        let bob_envelope = match style {
            MotionStyle::LoopClosure => 0.5 * (1.0 - (TAU * k as f64 / last).cos()),
            _ => 1.0,
        };
        let root = Rotation::about_y(heading) * Rotation::about_z(sway[0].at(t)) * Rotation::about_x(sway[1].at(t));
        let mut theta_b: Vec<Vec3> = channels
            .iter()
            .map(|c| Vec3::new(c[0].at(t), c[1].at(t), c[2].at(t)))
            .collect();
        clamp_to_limits(model, &mut theta_b);
        out.push(PoseParams {
            theta_r: root.to_axis_angle(),
            theta_b,
            t: pos + Vec3::new(0.0, bob_envelope * bob.at(t), 0.0),
            beta: vec![0.0; model.shape_count()],
        });
    }
    Ok(out)
}

/// Adds odometric drift along the horizontal direction `dir`: each sample
/// is displaced by `fraction ·` (path length travelled so far).
pub fn inject_drift(track: &[Vec3], fraction: f64, dir: &Vec3) -> Vec<Vec3> {
    let u = Vec3::new(dir.x, 0.0, dir.z).normalize();
    let mut travelled = 0.0;
    let mut out = Vec::with_capacity(track.len());
    for (i, p) in track.iter().enumerate() {
        if i > 0 {
            travelled += (p - track[i - 1]).norm();
        }
        out.push(p + u * (fraction * travelled));
    }
    out
}
