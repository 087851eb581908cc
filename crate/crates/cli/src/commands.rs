use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use emfuse::body::{BodyModel, PoseParams, ShapedBody};
use emfuse::calib::{
    align_camera_trajectory, align_root_trajectory, calibrate_skin_session, mean_std, solve_source_offsets, CalibrationFile,
    TrajectoryAlignment,
};
use emfuse::geom::{RigidTransform, Vec3};
use emfuse::io::{self, SequenceBundle};
use emfuse::metrics::{evaluate as metric_report, per_frame_csv, EvalSequence, MetricReport};
use emfuse::pipeline::{run_emp, stage2, stage3, EmpConfig, SequenceInput, SequenceSolution, Stage};
use emfuse::synth::{simulate_capture, ScenarioConfig};

use crate::{CalibMode, StageArg};

/// Bad invocation or missing inputs; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = io::read_file(path)?;
    Ok(io::from_json(&text, what).with_context(|| format!("reading {}", path.display()))?)
}

fn read_bundle(dir: &Path) -> Result<SequenceBundle> {
    SequenceBundle::read(dir).with_context(|| format!("reading bundle {}", dir.display()))
}

fn read_solution(path: &Path) -> Result<SequenceSolution> {
    let text = io::read_file(path)?;
    SequenceSolution::from_json(&text).with_context(|| format!("reading solution {}", path.display()))
}

pub fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>, fps: Option<u32>, subject: &str) -> Result<()> {
    let mut cfg: ScenarioConfig = match config {
        Some(p) => read_json(p, "scenario config")?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = fps {
        cfg.fps = f;
    }
    cfg.validate().context("invalid scenario config")?;
    let capture = simulate_capture(&cfg)?;
    let bundle = SequenceBundle::from_capture(&capture, subject);
    bundle.write(out)?;
    println!(
        "wrote {}: {} frames at {} fps, {} sensors, style {:?}, seed {}",
        out.display(),
        bundle.len(),
        cfg.fps,
        bundle.metadata.sensor_ids.len(),
        cfg.style,
        cfg.seed
    );
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    mean_std(x).0
}

pub fn calibrate(bundle_dir: &Path, mode: CalibMode, out: &Path, solution: Option<&Path>) -> Result<()> {
    let bundle = read_bundle(bundle_dir)?;
    let mut calib: CalibrationFile = if out.exists() {
        read_json(out, "calibration file")?
    } else {
        CalibrationFile::default()
    };
    match mode {
        CalibMode::Source => {
            let tracks = bundle
                .source_tracks
                .as_ref()
                .ok_or_else(|| usage("bundle has no source calibration tracks"))?;
            let sol = solve_source_offsets(tracks)?;
            println!(
                "source offsets: position rms {:.3e} m, angle rms {:.3e}°",
                sol.position_rms, sol.angle_rms_deg
            );
            calib.source_offsets = sol.offsets;
            calib.residuals.source = Some(sol.residual);
            calib.residuals.source_position_rms = Some(sol.position_rms);
            calib.residuals.source_angle_rms_deg = Some(sol.angle_rms_deg);
        }
        CalibMode::Skin => {
            let session = bundle
                .skin_session
                .as_ref()
                .ok_or_else(|| usage("bundle has no skin calibration session"))?;
            let source_offset = *calib
                .source_offset()
                .map_err(|_| usage("skin calibration needs the source offset; run --mode source first"))?;
            let offsets = calibrate_skin_session(
                &bundle.model,
                session,
                &bundle.metadata.anchors,
                &bundle.metadata.source_anchor,
                &source_offset,
            )?;
            calib.residuals.skin = offsets.iter().map(|o| o.residual).collect();
            println!("skin offsets: {} sensors, mean residual {:.3e}", offsets.len(), mean(&calib.residuals.skin));
            calib.skin_offsets = offsets;
            calib.beta = Some(session.beta.clone());
        }
        CalibMode::Camera => {
            let tag = bundle.device_tag.as_ref().ok_or_else(|| usage("bundle has no device tag track"))?;
            let a = align_camera_trajectory(&bundle.device_track(), tag)?;
            report_alignment("camera", &a);
            calib.residuals.camera_position_mean = Some(mean(&a.position_residuals));
            calib.residuals.camera_angle_mean_deg = Some(mean(&a.angle_residuals));
            calib.camera = Some(a);
        }
        CalibMode::Root => {
            let tag = bundle.device_tag.as_ref().ok_or_else(|| usage("bundle has no device tag track"))?;
            let gt = bundle.gt.as_ref().ok_or_else(|| usage("root alignment needs world-frame ground truth"))?;
            let path = solution.ok_or_else(|| usage("root alignment needs --solution"))?;
            let sol = read_solution(path)?;
            let fitted = sol.s3.as_ref().or(sol.s2.as_ref()).ok_or_else(|| usage("solution has no device-world stage"))?;
            let device_root = roots(&bundle.model, fitted)?;
            let world_root = roots(&bundle.model, gt)?;
            let (a, dist) = align_root_trajectory(&device_root, &world_root, &bundle.device_track(), tag)?;
            report_alignment("root", &a);
            calib.residuals.root_distance_mean = Some(mean(&dist));
            println!("root: mean distance {:.3e} m", mean(&dist));
            calib.root = Some(a);
        }
    }
    io::write_atomic(out, &io::to_json_pretty(&calib, "calibration file")?)?;
    Ok(())
}

fn report_alignment(what: &str, a: &TrajectoryAlignment) {
    let (p, ps) = mean_std(&a.position_residuals);
    let (r, rs) = mean_std(&a.angle_residuals);
    println!("{what} alignment: position {p:.4} ± {ps:.4} m, angle {r:.3} ± {rs:.3}°");
}

fn roots(model: &BodyModel, poses: &[PoseParams]) -> Result<Vec<Vec3>> {
    Ok(poses
        .iter()
        .map(|p| Ok(model.forward_kinematics(p)?.0[0]))
        .collect::<emfuse::Result<_>>()?)
}

pub fn fit(
    bundle_dir: &Path,
    calibration: &Path,
    out: &Path,
    stage: StageArg,
    config: Option<&Path>,
    from: Option<&Path>,
) -> Result<()> {
    let bundle = read_bundle(bundle_dir)?;
    let calib: CalibrationFile = read_json(calibration, "calibration file")?;
    let cfg: EmpConfig = match config {
        Some(p) => read_json(p, "solver config")?,
        None => EmpConfig::default(),
    };
    cfg.validate().context("invalid solver config")?;
    if calib.skin_offsets.is_empty() {
        bail!(usage("calibration has no skin offsets; run calibrate --mode skin first"));
    }
    let anchors = calib.calibrated_anchors(&bundle.metadata.anchors).map_err(|e| usage(e.to_string()))?;
    let source_anchor = calib
        .calibrated_anchors(std::slice::from_ref(&bundle.metadata.source_anchor))
        .map_err(|e| usage(e.to_string()))?
        .remove(0);
    let beta = calib
        .beta
        .clone()
        .or_else(|| bundle.metadata.beta.clone())
        .ok_or_else(|| usage("no subject shape in the calibration or bundle"))?;
    let input = SequenceInput {
        beta: &beta,
        em: &bundle.em,
        frames: &bundle.frames,
        anchors: &anchors,
        source_anchor: &source_anchor,
    };
    let model = &bundle.model;

    let solution = match stage {
        StageArg::One | StageArg::All => {
            let last_stage = if stage == StageArg::One { Stage::One } else { Stage::Three };
            run_emp(model, &input, &EmpConfig { last_stage, ..cfg })?
        }
        StageArg::Two => {
            let mut prev = read_solution(from.ok_or_else(|| usage("stage 2 needs --from with a stage 1 solution"))?)?;
            if prev.s1.len() != bundle.len() {
                bail!(usage("stage 1 solution does not match the bundle"));
            }
            let s2 = stage2(model, &prev.s1, &input, &cfg.stage2).map_err(|e| e.in_stage("stage 2"))?;
            prev.s2 = Some(s2.poses);
            prev.s2_frames = s2.frames;
            prev.flags.stage2_propagated = s2.propagated;
            prev.s3 = None;
            prev
        }
        StageArg::Three => {
            let mut prev = read_solution(from.ok_or_else(|| usage("stage 3 needs --from with a stage 2 solution"))?)?;
            let s2 = prev.s2.as_ref().ok_or_else(|| usage("--from solution has no stage 2 output"))?;
            prev.flags.stage3_unfiltered = s2.len() < cfg.stage3.window;
            prev.s3 = Some(stage3(s2, &cfg.stage3).map_err(|e| e.in_stage("stage 3"))?);
            prev
        }
    };
    io::write_atomic(out, &solution.to_json()?)?;
    println!(
        "wrote {}: stages {}, {} frames",
        out.display(),
        ["s1", "s2", "s3"]
            .iter()
            .zip([true, solution.s2.is_some(), solution.s3.is_some()])
            .filter(|(_, p)| *p)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", "),
        solution.s1.len()
    );
    Ok(())
}

/// Stage outputs mapped into the studio world when an alignment is known.
/// Stage 1 stays relative to the EM source.
struct StagePoses {
    name: &'static str,
    poses: Vec<PoseParams>,
}

fn device_to_world(calib: Option<&CalibrationFile>) -> Option<RigidTransform> {
    let c = calib?;
    c.root.as_ref().or(c.camera.as_ref()).map(|a| a.world_transform)
}

fn stage_poses(model: &BodyModel, sol: &SequenceSolution, g: Option<&RigidTransform>) -> Result<Vec<StagePoses>> {
    let map = |poses: &[PoseParams]| -> Result<Vec<PoseParams>> {
        let Some(g) = g else { return Ok(poses.to_vec()) };
        poses
            .iter()
            .map(|p| {
                let rest = ShapedBody::new(model, &p.beta)?.joints[0];
                Ok(p.transformed(g, &rest))
            })
            .collect()
    };
    let mut out = vec![StagePoses {
        name: "s1",
        poses: sol.s1.clone(),
    }];
    if let Some(s2) = &sol.s2 {
        out.push(StagePoses { name: "s2", poses: map(s2)? });
    }
    if let Some(s3) = &sol.s3 {
        out.push(StagePoses { name: "s3", poses: map(s3)? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Frame of the stage 2/3 outputs: "world" when mapped through a
    /// calibration alignment, otherwise "device". Stage 1 is always
    /// relative to the EM source.
    pub frame: String,
    pub stages: BTreeMap<String, MetricReport>,
    /// Smoothing must not increase jitter.
    pub jitter_s3_le_s2: Option<bool>,
}

pub fn evaluate(solution: &Path, bundle_dir: &Path, out: &Path, calibration: Option<&Path>, fps: Option<u32>) -> Result<()> {
    let bundle = read_bundle(bundle_dir)?;
    let gt = bundle.gt.as_ref().ok_or_else(|| usage("bundle has no ground truth"))?;
    let sol = read_solution(solution)?;
    if sol.s1.len() != gt.len() {
        bail!(usage(format!("solution has {} frames, ground truth {}", sol.s1.len(), gt.len())));
    }
    let calib: Option<CalibrationFile> = calibration.map(|p| read_json(p, "calibration file")).transpose()?;
    let g = device_to_world(calib.as_ref());
    let fps = fps.unwrap_or(bundle.metadata.fps) as f64;
    let model = &bundle.model;
    let gt_eval = EvalSequence::from_poses(model, gt, true)?;

    let mut stages = BTreeMap::new();
    let mut files = Vec::new();
    for s in stage_poses(model, &sol, g.as_ref())? {
        let pred = EvalSequence::from_poses(model, &s.poses, true)?;
        let report = metric_report(&pred, &gt_eval, fps)?;
        files.push((format!("{}_metrics.csv", s.name), report.to_csv()));
        files.push((format!("{}_frames.csv", s.name), per_frame_csv(&pred, &gt_eval)?));
        println!(
            "{}: MPJPE {:.2} mm, MPJPE-PA {:.2} mm, MPJAE-PA {:.2}°",
            s.name, report.mpjpe.mean, report.mpjpe_pa.mean, report.mpjae_pa.mean
        );
        stages.insert(s.name.to_string(), report);
    }
    let jitter = |k: &str| stages.get(k).and_then(|r: &MetricReport| r.jitter).map(|j| j.mean);
    let jitter_s3_le_s2 = match (jitter("s2"), jitter("s3")) {
        (Some(a), Some(b)) => Some(b <= a),
        _ => None,
    };
    if jitter_s3_le_s2 == Some(false) {
        log::warn!("stage 3 jitter exceeds stage 2 jitter");
    }
    let report = EvaluationReport {
        frame: if g.is_some() { "world" } else { "device" }.into(),
        stages,
        jitter_s3_le_s2,
    };
    let json = io::to_json_pretty(&report, "evaluation report")?;
    io::write_dir_atomic(out, |dir| {
        io::write_file(&dir.join("report.json"), &json)?;
        for (name, content) in &files {
            io::write_file(&dir.join(name), content)?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn export(
    solution: &Path,
    bundle_dir: &Path,
    out: &Path,
    stage: StageArg,
    calibration: Option<&Path>,
    meshes: bool,
) -> Result<()> {
    let bundle = read_bundle(bundle_dir)?;
    let sol = read_solution(solution)?;
    let calib: Option<CalibrationFile> = calibration.map(|p| read_json(p, "calibration file")).transpose()?;
    let model = &bundle.model;
    let all = stage_poses(model, &sol, device_to_world(calib.as_ref()).as_ref())?;
    let name = match stage {
        StageArg::One => "s1",
        StageArg::Two => "s2",
        StageArg::Three => "s3",
        StageArg::All => all.last().map(|s| s.name).unwrap_or("s1"),
    };
    let poses = &all
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| usage(format!("solution has no {name} output")))?
        .poses;

    let mut joints = String::from("frame,joint,x,y,z\n");
    for (t, p) in poses.iter().enumerate() {
        for (j, x) in model.forward_kinematics(p)?.0.iter().enumerate() {
            let _ = writeln!(joints, "{t},{j},{},{},{}", x.x, x.y, x.z);
        }
    }
    let jsonl = io::to_jsonl(poses, "pose")?;
    io::write_dir_atomic(out, |dir| {
        io::write_file(&dir.join("poses.jsonl"), &jsonl)?;
        io::write_file(&dir.join("joints.csv"), &joints)?;
        if meshes {
            io::create_dir(&dir.join("meshes"))?;
            for (t, p) in poses.iter().enumerate() {
                let mesh = model.skin_mesh(p)?;
                let mut obj = String::new();
                for v in &mesh.vertices {
                    let _ = writeln!(obj, "v {} {} {}", v.x, v.y, v.z);
                }
                for f in &mesh.faces {
                    let _ = writeln!(obj, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
                }
                io::write_file(&dir.join("meshes").join(format!("{t:06}.obj")), &obj)?;
            }
        }
        Ok(())
    })?;
    println!("wrote {} ({name}, {} frames)", out.display(), poses.len());
    Ok(())
}
