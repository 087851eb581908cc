//! On-disk sequence bundles and atomic file output.
//!
//! A bundle is a directory:
//!
//! ```text
//! metadata.json        fps, frame count, subject, body-model path, sensors
//! body_model.json      the body model asset
//! em.jsonl             per frame: [{sensor_id, p, R}, ...]
//! camera.jsonl         per frame: {timestamp, K, Rc, tc, width, height, keypoints}
//! pcl/NNNNNN.xyz       per frame: "x y z" lines, metres, world frame
//! pcl/NNNNNN.crop      per frame: human-crop point indices, one per line
//! gt.jsonl             optional, per frame: Ω in the studio world
//! gt.json              optional, planted calibration truth
//! device_tag.jsonl     optional, per frame: tag pose on the device
//! calibration/source_tracks.json, calibration/skin_session.json  optional
//! ```
//!
//! Rotations are row-major 9-element arrays throughout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, PoseParams, SensorAnchor};
use crate::calib::SourceTracks;
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Rotation, Vec3};
use crate::synth::{Camera, CaptureFrame, Keypoint2D, ScenarioConfig, SensorFrameSet, SensorReading, SkinCalibrationData, SyntheticCapture};

pub const METADATA: &str = "metadata.json";
pub const BODY_MODEL: &str = "body_model.json";
pub const EM: &str = "em.jsonl";
pub const CAMERA: &str = "camera.jsonl";
pub const PCL_DIR: &str = "pcl";
pub const GT: &str = "gt.jsonl";
pub const TRUTH: &str = "gt.json";
pub const DEVICE_TAG: &str = "device_tag.jsonl";
pub const SOURCE_TRACKS: &str = "calibration/source_tracks.json";
pub const SKIN_SESSION: &str = "calibration/skin_session.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub fps: u32,
    pub frame_count: usize,
    pub subject_id: String,
    /// Relative to the bundle directory.
    pub body_model: String,
    pub source_id: usize,
    pub sensor_ids: Vec<usize>,
    /// Sensor anchors with nominal (uncalibrated) offsets.
    pub anchors: Vec<SensorAnchor>,
    pub source_anchor: SensorAnchor,
    /// Registered subject shape, when known.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    /// The generating scenario of synthetic bundles.
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
}

/// Planted quantities of a synthetic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub world_to_device: RigidTransform,
    pub source_offsets: Vec<RigidTransform>,
    /// Anchors carrying the planted skin offsets.
    pub anchors: Vec<SensorAnchor>,
    pub source_anchor: SensorAnchor,
    pub device_tag_offset: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub metadata: BundleMetadata,
    pub model: BodyModel,
    pub em: SensorFrameSet,
    /// Camera observations in the device world.
    pub frames: Vec<CaptureFrame>,
    /// Ground-truth poses in the studio world.
    pub gt: Option<Vec<PoseParams>>,
    pub truth: Option<GroundTruth>,
    /// Tag on the device, tracked in the studio world.
    pub device_tag: Option<Vec<RigidTransform>>,
    pub source_tracks: Option<SourceTracks>,
    pub skin_session: Option<SkinCalibrationData>,
}

/// One line of `camera.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraLine {
    timestamp: f64,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "Rc")]
    rc: Rotation,
    tc: [f64; 3],
    width: u32,
    height: u32,
    keypoints: Vec<Keypoint2D>,
}

impl SequenceBundle {
    /// Bundle of a synthetic capture, including all ground truth. Anchors
    /// in the metadata carry identity offsets.
    pub fn from_capture(capture: &SyntheticCapture, subject_id: &str) -> Self {
        let nominal = |a: &SensorAnchor| a.clone().with_offset(Rotation::identity(), Vec3::zeros());
        SequenceBundle {
            metadata: BundleMetadata {
                fps: capture.config.fps,
                frame_count: capture.em.len(),
                subject_id: subject_id.to_string(),
                body_model: BODY_MODEL.to_string(),
                source_id: capture.em.source_id,
                sensor_ids: capture.em.sensor_ids.clone(),
                anchors: capture.anchors.iter().map(nominal).collect(),
                source_anchor: nominal(&capture.source_anchor),
                beta: Some(capture.beta.clone()),
                scenario: Some(capture.config.clone()),
            },
            model: capture.model.clone(),
            em: capture.em.clone(),
            frames: capture.frames.clone(),
            gt: Some(capture.gt_poses.clone()),
            truth: Some(GroundTruth {
                world_to_device: capture.world_to_device,
                source_offsets: capture.source_offsets.clone(),
                anchors: capture.anchors.clone(),
                source_anchor: capture.source_anchor.clone(),
                device_tag_offset: capture.device_tag_offset,
            }),
            device_tag: Some(capture.device_tag.clone()),
            source_tracks: Some(capture.source_calibration.clone()),
            skin_session: Some(capture.skin_calibration.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.metadata.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.metadata.frame_count == 0
    }

    /// Self-localised camera poses (camera → device world).
    pub fn device_track(&self) -> Vec<RigidTransform> {
        self.frames.iter().map(CaptureFrame::camera_pose).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.metadata.frame_count;
        if self.metadata.fps == 0 {
            return Err(Error::invalid("bundle fps must be positive"));
        }
        let count = |what: &'static str, got: usize| {
            if got == n {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { what, expected: n, got })
            }
        };
        count("EM frames", self.em.len())?;
        count("camera frames", self.frames.len())?;
        if let Some(gt) = &self.gt {
            count("ground-truth poses", gt.len())?;
        }
        if let Some(tag) = &self.device_tag {
            count("device tag poses", tag.len())?;
        }
        if self.em.source_id != self.metadata.source_id || self.em.sensor_ids != self.metadata.sensor_ids {
            return Err(Error::invalid("EM stream and metadata disagree on sensor ids"));
        }
        self.em.validate()?;
        let mesh = self.model.template_mesh();
        for a in self.metadata.anchors.iter().chain([&self.metadata.source_anchor]) {
            a.validate(&mesh)?;
        }
        for (t, f) in self.frames.iter().enumerate() {
            f.validate().map_err(|e| Error::invalid(format!("camera frame {t}: {e}")))?;
            let finite = f.timestamp.is_finite()
                && f.camera.k.iter().all(|v| v.is_finite())
                && finite_transform(&f.extrinsics)
                && f.pointcloud.iter().all(|p| p.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::NonFinite(format!("camera frame {t}")));
            }
        }
        if let Some(gt) = &self.gt {
            for (t, p) in gt.iter().enumerate() {
                let values = p.theta_r.iter().chain(p.t.iter()).chain(p.theta_b.iter().flat_map(|v| v.iter())).chain(&p.beta);
                if values.into_iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("ground-truth pose {t}")));
                }
            }
        }
        if let Some(tag) = &self.device_tag {
            if !tag.iter().all(finite_transform) {
                return Err(Error::NonFinite("device tag track".into()));
            }
        }
        if let Some(s) = &self.source_tracks {
            s.validate()?;
        }
        if let Some(s) = &self.skin_session {
            s.em.validate()?;
            if s.poses.len() != s.em.len() || s.source_tag.len() != s.em.len() {
                return Err(Error::invalid("skin session streams differ in length"));
            }
        }
        Ok(())
    }

    /// Writes the bundle to `dir`, replacing any previous content. The
    /// bundle is assembled in a sibling temporary directory and renamed
    /// into place, so `dir` never holds a partial bundle.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        write_dir_atomic(dir, |tmp| {
            create_dir(&tmp.join(PCL_DIR))?;
            self.write_into(tmp)
        })
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(METADATA), &to_json_pretty(&self.metadata, "bundle metadata")?)?;
        write_file(&dir.join(&self.metadata.body_model), &self.model.to_json()?)?;
        write_file(&dir.join(EM), &to_jsonl(&self.em.frames, "EM frame")?)?;
        let lines: Vec<CameraLine> = self.frames.iter().map(camera_line).collect();
        write_file(&dir.join(CAMERA), &to_jsonl(&lines, "camera frame")?)?;
        for (t, f) in self.frames.iter().enumerate() {
            let mut xyz = String::new();
            for p in &f.pointcloud {
                let _ = writeln!(xyz, "{} {} {}", p.x, p.y, p.z);
            }
            let mut crop = String::new();
            for i in &f.human_crop {
                let _ = writeln!(crop, "{i}");
            }
            write_file(&pcl_path(dir, t, "xyz"), &xyz)?;
            write_file(&pcl_path(dir, t, "crop"), &crop)?;
        }
        if let Some(gt) = &self.gt {
            write_file(&dir.join(GT), &to_jsonl(gt, "ground-truth pose")?)?;
        }
        if let Some(truth) = &self.truth {
            write_file(&dir.join(TRUTH), &to_json_pretty(truth, "ground truth")?)?;
        }
        if let Some(tag) = &self.device_tag {
            write_file(&dir.join(DEVICE_TAG), &to_jsonl(tag, "device tag pose")?)?;
        }
        if self.source_tracks.is_some() || self.skin_session.is_some() {
            create_dir(&dir.join("calibration"))?;
        }
        if let Some(s) = &self.source_tracks {
            write_file(&dir.join(SOURCE_TRACKS), &to_json(s, "source tracks")?)?;
        }
        if let Some(s) = &self.skin_session {
            write_file(&dir.join(SKIN_SESSION), &to_json(s, "skin session")?)?;
        }
        Ok(())
    }

    /// Reads and validates a bundle.
    pub fn read(dir: &Path) -> Result<Self> {
        let metadata: BundleMetadata = from_json(&read_file(&dir.join(METADATA))?, METADATA)?;
        let model = BodyModel::from_json(&read_file(&dir.join(&metadata.body_model))?)?;
        let n = metadata.frame_count;

        let em_frames: Vec<Vec<SensorReading>> = read_jsonl(&dir.join(EM), n)?;
        let em = SensorFrameSet {
            source_id: metadata.source_id,
            sensor_ids: metadata.sensor_ids.clone(),
            frames: em_frames,
        };
        let lines: Vec<CameraLine> = read_jsonl(&dir.join(CAMERA), n)?;
        let frames = lines
            .into_iter()
            .enumerate()
            .map(|(t, line)| {
                let pointcloud = read_xyz(&pcl_path(dir, t, "xyz"))?;
                let human_crop = read_crop(&pcl_path(dir, t, "crop"))?;
                frame_from_line(line, pointcloud, human_crop).map_err(|e| Error::Format {
                    what: format!("{CAMERA} line {}", t + 1),
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let optional = |name: &str| {
            let p = dir.join(name);
            p.is_file().then_some(p)
        };
        let gt = optional(GT).map(|p| read_jsonl(&p, n)).transpose()?;
        let truth = optional(TRUTH).map(|p| from_json(&read_file(&p)?, TRUTH)).transpose()?;
        let device_tag = optional(DEVICE_TAG).map(|p| read_jsonl(&p, n)).transpose()?;
        let source_tracks = optional(SOURCE_TRACKS)
            .map(|p| from_json(&read_file(&p)?, SOURCE_TRACKS))
            .transpose()?;
        let skin_session = optional(SKIN_SESSION)
            .map(|p| from_json(&read_file(&p)?, SKIN_SESSION))
            .transpose()?;

        let bundle = SequenceBundle {
            metadata,
            model,
            em,
            frames,
            gt,
            truth,
            device_tag,
            source_tracks,
            skin_session,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn finite_transform(g: &RigidTransform) -> bool {
    g.translation.iter().chain(g.rotation.matrix().iter()).all(|v| v.is_finite())
}

fn camera_line(f: &CaptureFrame) -> CameraLine {
    let k = f.camera.k;
    CameraLine {
        timestamp: f.timestamp,
        k: std::array::from_fn(|i| k[(i / 3, i % 3)]),
        rc: f.extrinsics.rotation,
        tc: f.extrinsics.translation.into(),
        width: f.camera.width,
        height: f.camera.height,
        keypoints: f.keypoints.clone(),
    }
}

fn frame_from_line(line: CameraLine, pointcloud: Vec<Vec3>, human_crop: Vec<usize>) -> Result<CaptureFrame> {
    let k = crate::geom::Mat3::from_row_slice(&line.k);
    Ok(CaptureFrame {
        timestamp: line.timestamp,
        camera: Camera::from_k(k, line.width, line.height)?,
        extrinsics: RigidTransform::new(line.rc, Vec3::from(line.tc)),
        keypoints: line.keypoints,
        pointcloud,
        human_crop,
    })
}

fn pcl_path(dir: &Path, t: usize, ext: &str) -> PathBuf {
    dir.join(PCL_DIR).join(format!("{t:06}.{ext}"))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "bundle".into());
    dir.with_file_name(format!(".{name}.{tag}"))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Fills a fresh sibling directory through `fill` and renames it over
/// `dir`, so `dir` never holds partial output. Nothing is left behind when
/// `fill` fails.
pub fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = sibling(dir, "tmp");
    remove_dir(&tmp)?;
    create_dir(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = sibling(dir, "old");
    remove_dir(&old)?;
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| io_err(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| io_err(dir, e))?;
    remove_dir(&old)
}

/// Writes `content` through a temporary sibling file renamed into place.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let tmp = sibling(path, "tmp");
    write_file(&tmp, content)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path, e)
    })
}

fn format_err(what: &str, e: serde_json::Error) -> Error {
    Error::Format {
        what: what.to_string(),
        detail: e.to_string(),
    }
}

pub fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string(value).map_err(|e| format_err(what, e))
}

pub fn to_json_pretty<T: Serialize>(value: &T, what: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| format_err(what, e))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| format_err(what, e))
}

pub fn to_jsonl<T: Serialize>(items: &[T], what: &str) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_json(item, what)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSONL file that must hold exactly `expected` records.
fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: usize) -> Result<Vec<T>> {
    let name = path.display().to_string();
    let text = read_file(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != expected {
        return Err(Error::Format {
            what: name,
            detail: format!("{} lines, metadata says {expected} frames", lines.len()),
        });
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| from_json(l, &format!("{name} line {}", i + 1)))
        .collect()
}

fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    let name = path.display().to_string();
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|e| Error::Format {
                what: format!("{name} line {}", i + 1),
                detail: format!("{e}"),
            })?;
            match v[..] {
                [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
                _ => Err(Error::Format {
                    what: format!("{name} line {}", i + 1),
                    detail: "expected three finite coordinates".into(),
                }),
            }
        })
        .collect()
}

fn read_crop(path: &Path) -> Result<Vec<usize>> {
    let name = path.display().to_string();
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e| Error::Format {
                what: format!("{name} line {}", i + 1),
                detail: format!("{e}"),
            })
        })
        .collect()
}
