//! The three-stage solver: an EM-only fit in the source frame, a per-frame
//! lift into the camera's world using keypoints, EM, prior and depth, and a
//! smoothing pass.

mod stage1;
mod stage2;
mod stage3;
pub mod terms;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseParams, SensorAnchor};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LbfgsConfig, Trace};
use crate::synth::{CaptureFrame, SensorFrameSet};

pub use stage1::{stage1, stage1_frame_energy, Stage1Output};
pub use stage2::{stage2, stage2_frame_energy, Stage2FrameReport, Stage2Output};
pub use stage3::{savgol_filter, stage3, stage3_refined, PoseRefiner};
pub use terms::{e_2d, e_pcl, e_prior, e_rec, TermValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_rec: f64,
    pub lambda_bp: f64,
    pub lbfgs: LbfgsConfig,
    /// Root-only pass before the full one.
    pub two_pass: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lambda_p: 1.0,
            lambda_r: 1.0,
            lambda_rec: 1.0,
            lambda_bp: 1e-5,
            lbfgs: LbfgsConfig::default(),
            two_pass: true,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        non_negative(&[
            ("λ_p", self.lambda_p),
            ("λ_r", self.lambda_r),
            ("λ_rec", self.lambda_rec),
            ("λ_bp", self.lambda_bp),
        ])?;
        self.lbfgs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lambda_2d: f64,
    pub lambda_rec: f64,
    pub lambda_prior: f64,
    pub lambda_pcl: f64,
    /// Weights of the EM term's position and rotation parts.
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub adam: AdamConfig,
    /// Adam iterations for the first frame, which starts far from the
    /// solution.
    pub first_frame_iterations: usize,
    /// Keypoint confidence threshold.
    pub tau: f64,
    /// Geman–McClure scale in pixels.
    pub sigma_gm: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda_2d: 0.01,
            lambda_rec: 1.0,
            lambda_prior: 1.0,
            lambda_pcl: 10.0,
            lambda_p: 1.0,
            lambda_r: 1.0,
            adam: AdamConfig::default(),
            first_frame_iterations: 500,
            tau: 0.5,
            sigma_gm: 100.0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        non_negative(&[
            ("λ_2D", self.lambda_2d),
            ("λ_rec", self.lambda_rec),
            ("λ_prior", self.lambda_prior),
            ("λ_pcl", self.lambda_pcl),
            ("λ_p", self.lambda_p),
            ("λ_r", self.lambda_r),
        ])?;
        terms::check_2d(self.tau, self.sigma_gm)?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub window: usize,
    pub order: usize,
    /// Weight of `‖θ − θ^S2‖²` for a dense refiner plugged in after
    /// smoothing.
    pub lambda_reg: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            window: 7,
            order: 2,
            lambda_reg: 10.0,
        }
    }
}

impl Stage3Config {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window <= self.order {
            return Err(Error::invalid(format!(
                "smoothing window must be odd and longer than the polynomial order (window {}, order {})",
                self.window, self.order
            )));
        }
        non_negative(&[("λ_reg", self.lambda_reg)])
    }
}

fn non_negative(weights: &[(&str, f64)]) -> Result<()> {
    for (name, w) in weights {
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!("weight {name} must be finite and non-negative, got {w}")));
        }
    }
    Ok(())
}

/// Last stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmpConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub last_stage: Stage,
}

impl Default for EmpConfig {
    fn default() -> Self {
        EmpConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            last_stage: Stage::Three,
        }
    }
}

impl EmpConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()
    }
}

/// Everything the solver consumes for one sequence. EM readings are relative
/// to the source; camera frames are in the device world.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub beta: &'a [f64],
    pub em: &'a SensorFrameSet,
    /// Empty when only Stage 1 is wanted.
    pub frames: &'a [CaptureFrame],
    /// Sensor anchors carrying calibrated skin offsets.
    pub anchors: &'a [SensorAnchor],
    pub source_anchor: &'a SensorAnchor,
}

impl SequenceInput<'_> {
    pub fn len(&self) -> usize {
        self.em.len()
    }

    pub fn is_empty(&self) -> bool {
        self.em.is_empty()
    }

    fn validate(&self, model: &BodyModel, need_frames: bool) -> Result<()> {
        self.em.validate()?;
        if self.em.is_empty() {
            return Err(Error::invalid("sequence has no EM frames"));
        }
        if self.beta.len() != model.shape_count() {
            return Err(Error::DimensionMismatch {
                what: "shape coefficients",
                expected: model.shape_count(),
                got: self.beta.len(),
            });
        }
        if need_frames && self.frames.len() != self.em.len() {
            return Err(Error::DimensionMismatch {
                what: "camera frames",
                expected: self.em.len(),
                got: self.frames.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub stage3_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionFlags {
    /// Stage 1 frames whose optimisation failed and were interpolated.
    pub stage1_interpolated: Vec<usize>,
    /// Stage 2 frames without keypoints or depth, copied from the previous
    /// frame.
    pub stage2_propagated: Vec<usize>,
    /// Set when the sequence was too short to smooth.
    pub stage3_unfiltered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSolution {
    /// Poses relative to the EM source.
    pub s1: Vec<PoseParams>,
    /// Poses in the device world.
    pub s2: Option<Vec<PoseParams>>,
    pub s3: Option<Vec<PoseParams>>,
    /// Stage 1 L-BFGS traces, one per pass.
    pub s1_traces: Vec<Trace>,
    pub s2_frames: Vec<Stage2FrameReport>,
    pub flags: SolutionFlags,
    pub timing: StageTiming,
}

impl SequenceSolution {
    /// The output of the last stage that ran.
    pub fn final_poses(&self) -> &[PoseParams] {
        self.s3.as_deref().or(self.s2.as_deref()).unwrap_or(&self.s1)
    }

    /// Equality ignoring wall-clock timing.
    pub fn same_result(&self, other: &SequenceSolution) -> bool {
        let strip = |s: &SequenceSolution| SequenceSolution {
            timing: StageTiming::default(),
            ..s.clone()
        };
        strip(self) == strip(other)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            what: "sequence solution".into(),
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "sequence solution".into(),
            detail: e.to_string(),
        })
    }
}

/// Runs the stages up to `cfg.last_stage`. Errors are labelled with the
/// stage that raised them.
pub fn run_emp(model: &BodyModel, input: &SequenceInput<'_>, cfg: &EmpConfig) -> Result<SequenceSolution> {
    cfg.validate()?;
    input.validate(model, cfg.last_stage >= Stage::Two)?;

    let clock = Instant::now();
    let s1 = stage1(model, input, &cfg.stage1).map_err(|e| e.in_stage("stage 1"))?;
    let mut timing = StageTiming {
        stage1_s: clock.elapsed().as_secs_f64(),
        ..Default::default()
    };
    let mut out = SequenceSolution {
        s1: s1.poses,
        s2: None,
        s3: None,
        s1_traces: s1.traces,
        s2_frames: Vec::new(),
        flags: SolutionFlags {
            stage1_interpolated: s1.interpolated,
            ..Default::default()
        },
        timing: StageTiming::default(),
    };
    if cfg.last_stage >= Stage::Two {
        let clock = Instant::now();
        let s2 = stage2(model, &out.s1, input, &cfg.stage2).map_err(|e| e.in_stage("stage 2"))?;
        timing.stage2_s = clock.elapsed().as_secs_f64();
        out.flags.stage2_propagated = s2.propagated;
        out.s2_frames = s2.frames;
        if cfg.last_stage >= Stage::Three {
            let clock = Instant::now();
            let (s3, filtered) = stage3::smooth(&s2.poses, &cfg.stage3).map_err(|e| e.in_stage("stage 3"))?;
            timing.stage3_s = clock.elapsed().as_secs_f64();
            out.flags.stage3_unfiltered = !filtered;
            out.s3 = Some(s3);
        }
        out.s2 = Some(s2.poses);
    }
    out.timing = timing;
    Ok(out)
}
