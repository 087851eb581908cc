use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::terms::{rec_into, virtual_source};
use super::{SequenceInput, Stage1Config};
use crate::body::{joint_limit_penalty_grad, BodyModel, PoseGroups, PoseParams, SensorAnchor, ShapedBody};
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};
use crate::optim::{lbfgs_minimize, Objective, Trace};
use crate::synth::SensorReading;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Output {
    /// Body poses with the virtual source at the origin.
    pub poses: Vec<PoseParams>,
    pub traces: Vec<Trace>,
    pub interpolated: Vec<usize>,
}

struct Problem<'a> {
    model: &'a BodyModel,
    shaped: ShapedBody,
    template: PoseParams,
    frames: &'a [Vec<SensorReading>],
    anchors: &'a [SensorAnchor],
    source: &'a SensorAnchor,
    cfg: &'a Stage1Config,
}

impl Problem<'_> {
    /// `E_S1` of one frame at a full flat pose, adding its gradient to `grad`.
    fn frame(&self, t: usize, flat: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let pose = self.template.from_flat(flat);
        let state = self.model.pose_state(&self.shaped, &pose, true)?;
        let c = self.cfg;
        let Some(grad) = grad else {
            let (rec, _) = rec_into(
                &state.vertices,
                self.model.faces(),
                &self.frames[t],
                self.anchors,
                self.source,
                c.lambda_p,
                c.lambda_r,
                Some((c.lambda_p, c.lambda_r)),
                None,
            )?;
            return Ok(c.lambda_rec * rec + c.lambda_bp * joint_limit_penalty_grad(self.model, &pose, None));
        };
        let mut gv = vec![Vec3::zeros(); self.model.vertex_count()];
        let (rec, _) = rec_into(
            &state.vertices,
            self.model.faces(),
            &self.frames[t],
            self.anchors,
            self.source,
            c.lambda_p,
            c.lambda_r,
            Some((c.lambda_p, c.lambda_r)),
            Some((&mut gv, c.lambda_rec)),
        )?;
        let bp = joint_limit_penalty_grad(self.model, &pose, Some((&mut *grad, c.lambda_bp)));
        self.model
            .backward(&self.shaped, &pose, &state, &gv, &[], false)
            .add_flat_into(grad, 1.0);
        Ok(c.lambda_rec * rec + c.lambda_bp * bp)
    }
}

/// Selected frames of the sequence, each moving only the `free` coordinates
/// of its own full pose.
struct Batch<'a, 'p> {
    problem: &'a Problem<'p>,
    frames: Vec<usize>,
    bases: Vec<Vec<f64>>,
    free: &'a [usize],
}

impl Batch<'_, '_> {
    fn embed(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let mut full = self.bases[k].clone();
        for (&i, v) in self.free.iter().zip(x) {
            full[i] = *v;
        }
        full
    }

    fn start(&self) -> Vec<f64> {
        self.bases.iter().flat_map(|b| self.free.iter().map(|&i| b[i])).collect()
    }
}

impl Objective for Batch<'_, '_> {
    fn dimension(&self) -> usize {
        self.frames.len() * self.free.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let values: Vec<f64> = x
            .par_chunks(self.free.len())
            .enumerate()
            .map(|(k, xk)| self.problem.frame(self.frames[k], &self.embed(k, xk), None).unwrap_or(f64::NAN))
            .collect();
        values.iter().sum()
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.free.len();
        let values: Vec<f64> = x
            .par_chunks(d)
            .zip(grad.par_chunks_mut(d))
            .enumerate()
            .map(|(k, (xk, gk))| {
                let mut full = vec![0.0; self.bases[k].len()];
                let v = self
                    .problem
                    .frame(self.frames[k], &self.embed(k, xk), Some(&mut full))
                    .unwrap_or(f64::NAN);
                for (g, &i) in gk.iter_mut().zip(self.free) {
                    *g = full[i];
                }
                v
            })
            .collect();
        values.iter().sum()
    }
}

/// The zero pose moved so its virtual source is at the origin with identity
/// orientation.
fn source_gauge_init(model: &BodyModel, shaped: &ShapedBody, template: &PoseParams, source: &SensorAnchor) -> Result<PoseParams> {
    let state = model.pose_state(shaped, template, true)?;
    let (p, r) = virtual_source(&state.vertices, model.faces(), source)?;
    Ok(template.transformed(&RigidTransform::new(r, p).inverse(), &shaped.joints[0]))
}

/// Batched EM-only fit. Every frame starts from the same source-gauged rest
/// pose; a root-only pass is followed by a full one, both by L-BFGS over
/// all frames at once. If the batch fails numerically, frames are solved
/// one at a time and failures are interpolated from their neighbours.
pub fn stage1(model: &BodyModel, input: &SequenceInput<'_>, cfg: &Stage1Config) -> Result<Stage1Output> {
    cfg.validate()?;
    input.em.validate()?;
    let n = input.em.len();
    if n == 0 {
        return Err(Error::invalid("stage 1 needs at least one EM frame"));
    }
    let shaped = ShapedBody::new(model, input.beta)?;
    let template = PoseParams::zero(model).with_beta(input.beta);
    let problem = Problem {
        model,
        template: template.clone(),
        frames: &input.em.frames,
        anchors: input.anchors,
        source: input.source_anchor,
        cfg,
        shaped,
    };
    let init = source_gauge_init(model, &problem.shaped, &template, input.source_anchor)?.to_flat();

    let mut passes: Vec<Vec<usize>> = Vec::new();
    if cfg.two_pass {
        passes.push(PoseGroups::ROOT.indices(model));
    }
    passes.push(PoseGroups::ALL.indices(model));

    let mut current = vec![init; n];
    let mut traces = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    match run_batch(&problem, &all, &mut current, &passes) {
        Ok(t) => traces = t,
        Err(e) if e.is_numerical() => {
            log::warn!("batched stage 1 failed ({e}); solving frames individually");
        }
        Err(e) => return Err(e),
    }
    // Frames left non-finite by the batch are re-solved alone.
    let suspect: Vec<usize> = (0..n)
        .filter(|&t| !problem.frame(t, &current[t], None).is_ok_and(f64::is_finite))
        .collect();
    let mut failed = Vec::new();
    if !suspect.is_empty() {
        let solved: Vec<(usize, Option<Vec<f64>>)> = suspect
            .par_iter()
            .map(|&t| {
                let mut x = vec![problem_init(&problem, input.source_anchor)?; 1];
                let ok = run_batch(&problem, &[t], &mut x, &passes).is_ok()
                    && problem.frame(t, &x[0], None).is_ok_and(f64::is_finite);
                Ok((t, ok.then(|| x.remove(0))))
            })
            .collect::<Result<_>>()?;
        for (t, x) in solved {
            match x {
                Some(x) => current[t] = x,
                None => failed.push(t),
            }
        }
    }
    if failed.len() == n {
        return Err(Error::NonConvergence {
            reason: format!("stage 1 failed on all {n} frames"),
            last_value: f64::NAN,
        });
    }
    interpolate(&mut current, &failed);

    Ok(Stage1Output {
        poses: current.iter().map(|x| template.from_flat(x)).collect(),
        traces,
        interpolated: failed,
    })
}

fn problem_init(problem: &Problem<'_>, source: &SensorAnchor) -> Result<Vec<f64>> {
    Ok(source_gauge_init(problem.model, &problem.shaped, &problem.template, source)?.to_flat())
}

fn run_batch(problem: &Problem<'_>, frames: &[usize], current: &mut [Vec<f64>], passes: &[Vec<usize>]) -> Result<Vec<Trace>> {
    let mut traces = Vec::with_capacity(passes.len());
    for free in passes {
        if free.is_empty() {
            continue;
        }
        let batch = Batch {
            problem,
            frames: frames.to_vec(),
            bases: current.to_vec(),
            free,
        };
        let res = lbfgs_minimize(&batch, &batch.start(), &problem.cfg.lbfgs)?;
        if let Some(w) = &res.warning {
            log::warn!("stage 1: {w}");
        }
        for (k, xk) in res.x.chunks(free.len()).enumerate() {
            current[k] = batch.embed(k, xk);
        }
        traces.push(res.trace);
    }
    Ok(traces)
}

/// Linear interpolation of the flat pose vector over failed frames, holding
/// the nearest good frame at the ends.
fn interpolate(current: &mut [Vec<f64>], failed: &[usize]) {
    if failed.is_empty() {
        return;
    }
    let n = current.len();
    let mut good = vec![true; n];
    for &t in failed {
        good[t] = false;
    }
    for &t in failed {
        let prev = (0..t).rev().find(|&i| good[i]);
        let next = (t + 1..n).find(|&i| good[i]);
        current[t] = match (prev, next) {
            (Some(a), Some(b)) => {
                let w = (t - a) as f64 / (b - a) as f64;
                current[a].iter().zip(&current[b]).map(|(x, y)| x + w * (y - x)).collect()
            }
            (Some(a), None) => current[a].clone(),
            (None, Some(b)) => current[b].clone(),
            (None, None) => unreachable!("at least one frame succeeded"),
        };
        log::warn!("stage 1 frame {t} interpolated from neighbours");
    }
}

/// `E_S1` of frame `t` at `pose`, writing its gradient over the flat pose
/// into `grad` when given.
pub fn stage1_frame_energy(
    model: &BodyModel,
    input: &SequenceInput<'_>,
    cfg: &Stage1Config,
    t: usize,
    pose: &PoseParams,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    input.validate(model, false)?;
    if t >= input.len() {
        return Err(Error::invalid(format!("frame {t} out of range for {} frames", input.len())));
    }
    let problem = Problem {
        model,
        shaped: ShapedBody::new(model, input.beta)?,
        template: PoseParams::zero(model).with_beta(input.beta),
        frames: &input.em.frames,
        anchors: input.anchors,
        source: input.source_anchor,
        cfg,
    };
    let flat = pose.to_flat();
    match grad {
        Some(g) => {
            g.fill(0.0);
            problem.frame(t, &flat, Some(g))
        }
        None => problem.frame(t, &flat, None),
    }
}
