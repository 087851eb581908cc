//! Reference registration from a multi-view capture: keypoint
//! triangulation and robust body-to-scan fitting.

mod triangulate;

pub use triangulate::{triangulate_keypoints, Triangulation};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{joint_limit_penalty_grad, toy, BodyModel, PoseGroups, PoseParams, ShapedBody};
use crate::error::{Error, Result};
use crate::geom::{MeshBvh, RigidTransform, Robustifier, TriangleMesh, Vec3};
use crate::optim::{adam_minimize, AdamConfig, Objective, Restricted, Trace};
use crate::synth::{Camera, Keypoint2D};

/// One calibrated camera of the rig with its per-frame detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub camera: Camera,
    /// World to camera.
    pub extrinsics: RigidTransform,
    /// `keypoints[frame][k]`.
    pub keypoints: Vec<Vec<Keypoint2D>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewObservation {
    pub views: Vec<View>,
    /// Reconstructed surface per frame.
    pub scans: Vec<TriangleMesh>,
    /// Tracked tag on the lower back, per frame; empty when not tracked.
    #[serde(default)]
    pub back_tags: Vec<Option<RigidTransform>>,
}

impl MultiViewObservation {
    /// Frames covered by the scans, or by the detections when there are
    /// no scans.
    pub fn frame_count(&self) -> usize {
        match self.views.first() {
            Some(v) if self.scans.is_empty() => v.keypoints.len(),
            _ => self.scans.len(),
        }
    }

    pub fn back_tag(&self, frame: usize) -> Option<&RigidTransform> {
        self.back_tags.get(frame).and_then(|t| t.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frame_count();
        for (i, v) in self.views.iter().enumerate() {
            if v.keypoints.len() != n {
                return Err(Error::DimensionMismatch {
                    what: if i == 0 { "keypoint frames of view 0" } else { "keypoint frames of a view" },
                    expected: n,
                    got: v.keypoints.len(),
                });
            }
        }
        if !self.back_tags.is_empty() && self.back_tags.len() != n {
            return Err(Error::DimensionMismatch {
                what: "back tag frames",
                expected: n,
                got: self.back_tags.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub scan_sample_count: usize,
    /// Weight factor for scan samples lying outside the current body mesh.
    pub outside_weight_multiplier: f64,
    /// `w_j` per keypoint; empty means all ones.
    pub joint_weights: Vec<f64>,
    /// Vertices whose centroid is held at the back tag; empty selects the
    /// toy body's lower-back set.
    pub spine_vertices: Vec<usize>,
    pub lambda_j: f64,
    pub lambda_s: f64,
    pub lambda_spine: f64,
    pub lambda_reg: f64,
    pub robustifier: Robustifier,
    pub min_confidence: f64,
    pub two_pass: bool,
    pub pass1: AdamConfig,
    pub pass2: AdamConfig,
    /// First pass of [`solve_shape`], which couples β with the pose and
    /// converges more slowly.
    pub shape_pass: AdamConfig,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            scan_sample_count: 50_000,
            outside_weight_multiplier: 5.0,
            joint_weights: toy::keypoint_weights(),
            spine_vertices: Vec::new(),
            lambda_j: 1.0,
            lambda_s: 1.0,
            lambda_spine: 0.1,
            lambda_reg: 1e-3,
            robustifier: Robustifier::default(),
            min_confidence: 0.5,
            two_pass: true,
            pass1: AdamConfig {
                iterations: 300,
                ..AdamConfig::default()
            },
            pass2: AdamConfig::default(),
            shape_pass: AdamConfig {
                iterations: 2000,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_j, self.lambda_s, self.lambda_spine, self.lambda_reg];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("registration term weights must be finite and non-negative"));
        }
        if !(self.outside_weight_multiplier > 0.0) || self.joint_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("outside multiplier and joint weights must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::invalid("keypoint confidence threshold must lie in [0, 1]"));
        }
        self.pass1.validate()?;
        self.pass2.validate()?;
        self.shape_pass.validate()
    }
}

/// Weighted energy terms at one parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanTerms {
    pub keypoints: f64,
    pub surface: f64,
    pub spine: f64,
    pub regularizer: f64,
}

impl ScanTerms {
    pub fn total(&self) -> f64 {
        self.keypoints + self.surface + self.spine + self.regularizer
    }
}

impl std::fmt::Display for ScanTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "E_J {:e}, E_S {:e}, E_spine {:e}, E_reg {:e}",
            self.keypoints, self.surface, self.spine, self.regularizer
        )
    }
}

#[derive(Debug, Clone)]
pub struct ScanFit {
    pub pose: PoseParams,
    pub value: f64,
    pub terms: ScanTerms,
    /// Both passes, concatenated.
    pub trace: Trace,
}

/// True iff `p` lies inside the closed mesh (non-zero signed crossing
/// count of a ray).
pub fn inside_mesh_test(p: &Vec3, mesh: &TriangleMesh) -> Result<bool> {
    if !mesh.is_watertight() {
        return Err(Error::invalid("inside test needs a watertight mesh"));
    }
    let bvh = MeshBvh::build(mesh)?;
    Ok(inside(&bvh, p))
}

const RAY_DIRS: [[f64; 3]; 6] = [
    [0.5773, 0.5774, 0.5775],
    [-0.2673, 0.5345, 0.8018],
    [0.8729, -0.2182, 0.4364],
    [-0.4082, -0.8165, 0.4083],
    [0.3015, 0.3015, -0.9045],
    [-0.7071, 0.0101, -0.7070],
];

pub(crate) fn inside(bvh: &MeshBvh<'_>, p: &Vec3) -> bool {
    // A grazing ray is retried along the next direction.
    RAY_DIRS
        .iter()
        .find_map(|d| bvh.signed_crossings(p, &Vec3::new(d[0], d[1], d[2])))
        .is_some_and(|c| c != 0)
}

/// Bidirectional robust surface term
/// `mean_i w_i ρ(d²(s_i, M)) + mean_v ρ(d²(v, S))` between scan samples
/// `s_i` (on the scan behind `scan`) and the vertices of `mesh`. Samples
/// outside `mesh` get weight `outside_multiplier`, the rest 1. When `grad`
/// is given, `scale · dE/d(mesh vertex)` is accumulated into it.
pub fn surface_term(
    samples: &[Vec3],
    scan: &MeshBvh<'_>,
    mesh: &TriangleMesh,
    rho: &Robustifier,
    outside_multiplier: f64,
    grad: Option<(&mut [Vec3], f64)>,
) -> Result<f64> {
    let bvh = MeshBvh::build(mesh)?;
    let weigh = outside_multiplier != 1.0;
    let to_mesh: Vec<_> = samples
        .par_iter()
        .map(|s| {
            let hit = bvh.closest_point(s);
            let w = if weigh && !inside(&bvh, s) { outside_multiplier } else { 1.0 };
            let (r, dr) = rho.rho_sq(hit.sq_distance);
            (w * r, w * dr, hit, *s)
        })
        .collect();
    let to_scan: Vec<_> = mesh
        .vertices
        .par_iter()
        .map(|v| {
            let hit = scan.closest_point(v);
            let (r, dr) = rho.rho_sq(hit.sq_distance);
            (r, dr, hit.point)
        })
        .collect();
    let ns = samples.len().max(1) as f64;
    let nv = mesh.vertices.len().max(1) as f64;
    let e_a: f64 = to_mesh.iter().map(|t| t.0).sum::<f64>() / ns;
    let e_b: f64 = to_scan.iter().map(|t| t.0).sum::<f64>() / nv;
    if let Some((g, scale)) = grad {
        for (_, dr, hit, s) in &to_mesh {
            // d/dV_k ‖s − Σ b_k V_k‖² = −2 b_k (s − y), closest feature frozen.
            let f = mesh.faces[hit.face];
            let base = (s - hit.point) * (-2.0 * dr * scale / ns);
            for k in 0..3 {
                g[f[k]] += base * hit.barycentric[k];
            }
        }
        for (i, (_, dr, y)) in to_scan.iter().enumerate() {
            g[i] += (mesh.vertices[i] - y) * (2.0 * dr * scale / nv);
        }
    }
    Ok(e_a + e_b)
}

struct ScanObjective<'a> {
    model: &'a BodyModel,
    shaped: ShapedBody,
    base: PoseParams,
    with_beta: bool,
    targets: Vec<(usize, Vec3)>,
    weights: Vec<f64>,
    scan: MeshBvh<'a>,
    samples: Vec<Vec3>,
    spine: Vec<usize>,
    tag: Option<Vec3>,
    cfg: &'a RegistrationConfig,
}

impl ScanObjective<'_> {
    fn flat_len(&self) -> usize {
        PoseParams::flat_len(self.model.joint_count())
    }

    fn pose_of(&self, x: &[f64]) -> PoseParams {
        let n = self.flat_len();
        let mut pose = self.base.from_flat(&x[..n]);
        if self.with_beta {
            pose.beta = x[n..].to_vec();
        }
        pose
    }

    fn start(&self) -> Vec<f64> {
        let mut x = self.base.to_flat();
        if self.with_beta {
            x.extend_from_slice(&self.base.beta);
        }
        x
    }

    fn terms(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<ScanTerms> {
        let model = self.model;
        let cfg = self.cfg;
        let pose = self.pose_of(x);
        let owned;
        let shaped = if self.with_beta {
            owned = ShapedBody::new(model, &pose.beta)?;
            &owned
        } else {
            &self.shaped
        };
        let state = model.pose_state(shaped, &pose, true)?;
        let want_grad = grad.is_some();
        let mut gv = vec![Vec3::zeros(); if want_grad { model.vertex_count() } else { 0 }];

        let mut e_j = 0.0;
        if !self.targets.is_empty() {
            let kps = model.regress_keypoints_from(&state.vertices)?;
            let n = self.targets.len() as f64;
            let mut gk = vec![Vec3::zeros(); kps.len()];
            for &(k, target) in &self.targets {
                let d = kps[k] - target;
                e_j += self.weights[k] * d.norm_squared();
                gk[k] += d * (2.0 * cfg.lambda_j * self.weights[k] / n);
            }
            e_j *= cfg.lambda_j / n;
            if want_grad {
                model.keypoint_backward(&gk, &mut gv);
            }
        }

        let mesh = TriangleMesh {
            vertices: state.vertices.clone(),
            faces: model.faces().to_vec(),
            normals: None,
        };
        let e_s = cfg.lambda_s
            * surface_term(
                &self.samples,
                &self.scan,
                &mesh,
                &cfg.robustifier,
                cfg.outside_weight_multiplier,
                want_grad.then_some((&mut gv[..], cfg.lambda_s)),
            )?;

        let mut e_spine = 0.0;
        if let (Some(q), false) = (self.tag, self.spine.is_empty()) {
            let n = self.spine.len() as f64;
            let centre = self.spine.iter().map(|&v| state.vertices[v]).sum::<Vec3>() / n;
            let d = centre - q;
            e_spine = cfg.lambda_spine * d.norm_squared();
            if want_grad {
                for &v in &self.spine {
                    gv[v] += d * (2.0 * cfg.lambda_spine / n);
                }
            }
        }

        let e_reg;
        if let Some(g) = grad {
            g.fill(0.0);
            let pg = model.backward(shaped, &pose, &state, &gv, &[], self.with_beta);
            pg.add_flat_into(g, 1.0);
            if let Some(gb) = &pg.beta {
                let n = self.flat_len();
                g[n..].copy_from_slice(gb);
            }
            e_reg = cfg.lambda_reg * joint_limit_penalty_grad(model, &pose, Some((g, cfg.lambda_reg)));
        } else {
            e_reg = cfg.lambda_reg * joint_limit_penalty_grad(model, &pose, None);
        }
        Ok(ScanTerms {
            keypoints: e_j,
            surface: e_s,
            spine: e_spine,
            regularizer: e_reg,
        })
    }
}

impl Objective for ScanObjective<'_> {
    fn dimension(&self) -> usize {
        self.flat_len() + if self.with_beta { self.model.shape_count() } else { 0 }
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.terms(x, None).map_or(f64::NAN, |t| t.total())
    }
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.terms(x, Some(grad)).map_or(f64::NAN, |t| t.total())
    }
}

fn fit(model: &BodyModel, obs: &MultiViewObservation, frame: usize, init: &PoseParams, cfg: &RegistrationConfig, with_beta: bool) -> Result<ScanFit> {
    cfg.validate()?;
    obs.validate()?;
    init.check(model)?;
    if frame >= obs.scans.len() {
        return Err(Error::invalid(format!("frame {frame} out of range ({} frames)", obs.frame_count())));
    }
    let weights = if cfg.joint_weights.is_empty() {
        vec![1.0; model.keypoint_count()]
    } else {
        cfg.joint_weights.clone()
    };
    if weights.len() != model.keypoint_count() {
        return Err(Error::DimensionMismatch {
            what: "joint weights",
            expected: model.keypoint_count(),
            got: weights.len(),
        });
    }
    let spine = if cfg.spine_vertices.is_empty() {
        toy::lower_back_vertices(model)
    } else {
        cfg.spine_vertices.clone()
    };
    if spine.iter().any(|&v| v >= model.vertex_count()) {
        return Err(Error::invalid("spine vertex index out of range"));
    }
    let targets: Vec<(usize, Vec3)> = if obs.views.len() >= 2 {
        let tri = triangulate_keypoints(obs, frame, cfg.min_confidence)?;
        tri.points.iter().enumerate().filter_map(|(k, p)| p.map(|p| (k, p))).collect()
    } else {
        Vec::new()
    };
    let scan_mesh = &obs.scans[frame];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let samples = scan_mesh.sample_surface(&mut rng, cfg.scan_sample_count);
    let obj = ScanObjective {
        model,
        shaped: ShapedBody::new(model, &init.beta)?,
        base: init.clone(),
        with_beta,
        targets,
        weights,
        scan: MeshBvh::build(scan_mesh)?,
        samples,
        spine,
        tag: obs.back_tag(frame).map(|t| t.translation),
        cfg,
    };

    let x0 = obj.start();
    let start_terms = obj.terms(&x0, None)?;
    if !start_terms.total().is_finite() {
        return Err(Error::NonFinite(format!("registration cost at the initialization ({start_terms})")));
    }
    let flat = PoseParams::flat_len(model.joint_count());
    let mut free = PoseGroups::ALL.indices(model);
    if with_beta {
        free.extend(flat..flat + model.shape_count());
    }
    let mut passes = vec![(free, if with_beta { &cfg.shape_pass } else { &cfg.pass1 })];
    if cfg.two_pass {
        passes.push((PoseGroups::ROTATIONS.indices(model), &cfg.pass2));
    }
    let mut x = x0;
    let mut trace = Trace::default();
    for (free, adam) in passes {
        let sub = Restricted::new(&obj, x.clone(), free);
        let res = adam_minimize(&sub, &sub.start(), adam).map_err(|e| match e {
            Error::NonFinite(what) => {
                let terms = obj.terms(&x, None).map(|t| t.to_string()).unwrap_or_default();
                Error::NonFinite(format!("{what}; terms at pass start: {terms}"))
            }
            other => other,
        })?;
        x = sub.embed(&res.x);
        trace.entries.extend(res.trace.entries);
    }
    let terms = obj.terms(&x, None)?;
    Ok(ScanFit {
        pose: obj.pose_of(&x),
        value: terms.total(),
        terms,
        trace,
    })
}

/// Fits pose and translation (shape fixed at `init.beta`) to one frame:
/// pass 1 moves `(θ_r, θ_b, t)`, pass 2 refines `(θ_r, θ_b)`.
pub fn fit_body_to_scan(
    model: &BodyModel,
    obs: &MultiViewObservation,
    frame: usize,
    init: &PoseParams,
    cfg: &RegistrationConfig,
) -> Result<ScanFit> {
    fit(model, obs, frame, init, cfg, false)
}

/// Shape from a near-A-pose frame: as [`fit_body_to_scan`] with β free in
/// the first pass. Only β is returned.
pub fn solve_shape(
    model: &BodyModel,
    obs: &MultiViewObservation,
    frame: usize,
    init: &PoseParams,
    cfg: &RegistrationConfig,
) -> Result<Vec<f64>> {
    Ok(fit(model, obs, frame, init, cfg, true)?.pose.beta)
}

/// Registers every frame in order, each warm-started from the previous
/// result; `beta` is fixed throughout.
pub fn register_sequence(
    model: &BodyModel,
    obs: &MultiViewObservation,
    init: &PoseParams,
    cfg: &RegistrationConfig,
) -> Result<Vec<ScanFit>> {
    let mut out: Vec<ScanFit> = Vec::with_capacity(obs.frame_count());
    for frame in 0..obs.frame_count() {
        let start = out.last().map_or(init, |f| &f.pose);
        let fit = fit_body_to_scan(model, obs, frame, start, cfg).inspect_err(|e| log::warn!("registration of frame {frame}: {e}"))?;
        out.push(fit);
    }
    Ok(out)
}
