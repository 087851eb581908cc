//! Shared solver for rigid "offset chains": every observation predicts
//! `C_t ≈ A_t · X · B_t · Y_g`, with `X` shared and `Y_g` constant per
//! group, scored by squared position error plus squared Frobenius error
//! of the rotation. Optional point pairs `c ≈ A·X·b` constrain `X` alone.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{exp_vjp, Mat3, RigidTransform, Rotation, Vec3};
use crate::optim::{lbfgs_minimize, LbfgsConfig, Objective};
use crate::synth::noise::random_rotation;

pub(crate) const MULTI_START: usize = 8;
/// Smallest-to-largest Hessian eigenvalue ratio below which the problem is
/// reported as under-constrained.
pub(crate) const CONDITION_LIMIT: f64 = 1e-9;
const ALTERNATIONS: usize = 50;

#[derive(Debug, Clone)]
pub(crate) struct ChainTerm {
    pub a: RigidTransform,
    pub b: RigidTransform,
    pub c: RigidTransform,
    pub group: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PointTerm {
    pub a: RigidTransform,
    pub b: Vec3,
    pub c: Vec3,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ChainProblem {
    pub terms: Vec<ChainTerm>,
    pub points: Vec<PointTerm>,
    pub groups: usize,
    pub point_weight: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ChainSolution {
    pub x: RigidTransform,
    pub ys: Vec<RigidTransform>,
    /// Summed objective.
    pub objective: f64,
}

/// Offset `(t_o, R_o)` as the rigid transform it right-multiplies with.
pub(crate) fn offset_as_transform(o: &RigidTransform) -> RigidTransform {
    RigidTransform::new(o.rotation, o.rotation.rotate(&o.translation))
}

pub(crate) fn transform_as_offset(t: &RigidTransform) -> RigidTransform {
    RigidTransform::new(t.rotation, t.rotation.transpose().rotate(&t.translation))
}

struct ChainObjective<'a> {
    problem: &'a ChainProblem,
    base_x: Rotation,
    base_y: Vec<Rotation>,
    scale: f64,
}

impl ChainObjective<'_> {
    fn unpack(&self, x: &[f64]) -> (RigidTransform, Vec<RigidTransform>) {
        let rt = |base: &Rotation, s: &[f64]| {
            RigidTransform::new(
                *base * Rotation::from_axis_angle(&Vec3::new(s[0], s[1], s[2])),
                Vec3::new(s[3], s[4], s[5]),
            )
        };
        let tx = rt(&self.base_x, &x[0..6]);
        let ys = (0..self.problem.groups)
            .map(|g| rt(&self.base_y[g], &x[6 + 6 * g..12 + 6 * g]))
            .collect();
        (tx, ys)
    }
}

/// Gradients `(dR, dp)` of one sample with respect to `X` and `Y`.
#[derive(Clone)]
struct Grad {
    rx: Mat3,
    px: Vec3,
    ry: Vec<(Mat3, Vec3)>,
    f: f64,
}

impl Grad {
    fn zero(groups: usize) -> Self {
        Grad {
            rx: Mat3::zeros(),
            px: Vec3::zeros(),
            ry: vec![(Mat3::zeros(), Vec3::zeros()); groups],
            f: 0.0,
        }
    }

    fn add(mut self, o: Grad) -> Grad {
        self.rx += o.rx;
        self.px += o.px;
        for (a, b) in self.ry.iter_mut().zip(o.ry) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.f += o.f;
        self
    }
}

impl ChainProblem {
    pub fn sample_count(&self) -> usize {
        self.terms.len() + self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.iter().any(|t| t.group >= self.groups) {
            return Err(Error::invalid("chain term refers to an unknown group"));
        }
        if self.sample_count() == 0 {
            return Err(Error::invalid("no observations"));
        }
        let finite = |t: &RigidTransform| t.translation.iter().chain(t.rotation.matrix().iter()).all(|v| v.is_finite());
        if !self.terms.iter().all(|t| finite(&t.a) && finite(&t.b) && finite(&t.c))
            || !self.points.iter().all(|p| finite(&p.a) && p.b.iter().chain(p.c.iter()).all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("calibration tracks".into()));
        }
        if !(self.point_weight >= 0.0) {
            return Err(Error::invalid("point weight must be ≥ 0"));
        }
        Ok(())
    }

    /// Summed objective and its gradient with respect to the rotation
    /// matrices and translations.
    fn evaluate(&self, x: &RigidTransform, ys: &[RigidTransform]) -> Grad {
        let g = self.groups;
        let terms = self
            .terms
            .par_iter()
            .fold(
                || Grad::zero(g),
                |mut acc, t| {
                    let y = &ys[t.group];
                    let l = t.a.compose(x);
                    let k = t.b.compose(y);
                    let m = l.compose(&k);
                    let rp = m.translation - t.c.translation;
                    let rr = m.rotation.matrix() - t.c.rotation.matrix();
                    acc.f += rp.norm_squared() + rr.norm_squared();
                    let gp = rp * 2.0;
                    let gr = rr * 2.0;
                    let d_rl = gr * k.rotation.matrix().transpose() + gp * k.translation.transpose();
                    let d_rk = l.rotation.matrix().transpose() * gr;
                    let d_pk = l.rotation.transpose().rotate(&gp);
                    acc.rx += t.a.rotation.matrix().transpose() * d_rl;
                    acc.px += t.a.rotation.transpose().rotate(&gp);
                    let bt = t.b.rotation.transpose();
                    acc.ry[t.group].0 += bt.matrix() * d_rk;
                    acc.ry[t.group].1 += bt.rotate(&d_pk);
                    acc
                },
            )
            .reduce(|| Grad::zero(g), Grad::add);
        let w = self.point_weight;
        let points = self
            .points
            .par_iter()
            .fold(
                || Grad::zero(g),
                |mut acc, p| {
                    let l = p.a.compose(x);
                    let r = l.apply(&p.b) - p.c;
                    acc.f += w * r.norm_squared();
                    let gp = r * (2.0 * w);
                    acc.rx += p.a.rotation.matrix().transpose() * (gp * p.b.transpose());
                    acc.px += p.a.rotation.transpose().rotate(&gp);
                    acc
                },
            )
            .reduce(|| Grad::zero(g), Grad::add);
        terms.add(points)
    }

    pub fn objective(&self, x: &RigidTransform, ys: &[RigidTransform]) -> f64 {
        self.evaluate(x, ys).f
    }

    /// Alternating closed-form rotation updates from `rx`.
    fn rotation_init(&self, rx: Rotation) -> (Rotation, Vec<Rotation>) {
        let mut rx = rx;
        let mut ry = vec![Rotation::identity(); self.groups];
        for it in 0..ALTERNATIONS {
            let mut acc = vec![Mat3::zeros(); self.groups];
            for t in &self.terms {
                let m = t.a.rotation * rx * t.b.rotation;
                acc[t.group] += m.matrix().transpose() * t.c.rotation.matrix();
            }
            for (r, a) in ry.iter_mut().zip(&acc) {
                *r = Rotation::project(a);
            }
            if self.terms.is_empty() || it + 1 == ALTERNATIONS {
                break;
            }
            let mut ax = Mat3::zeros();
            for t in &self.terms {
                let n = t.a.rotation.transpose() * t.c.rotation;
                let m = t.b.rotation * ry[t.group];
                ax += n.matrix() * m.matrix().transpose();
            }
            rx = Rotation::project(&ax);
        }
        (rx, ry)
    }

    /// Least-squares translations for fixed rotations.
    fn translation_init(&self, rx: &Rotation) -> Result<(Vec3, Vec<Vec3>)> {
        let n = 3 + 3 * self.groups;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        let mut add = |blocks: &[(usize, Mat3)], target: Vec3, w: f64| {
            for (i, ji) in blocks {
                for (j, jj) in blocks {
                    let b = ji.transpose() * jj * w;
                    for r in 0..3 {
                        for c in 0..3 {
                            h[(i + r, j + c)] += b[(r, c)];
                        }
                    }
                }
                let v = ji.transpose() * target * w;
                for r in 0..3 {
                    rhs[i + r] += v[r];
                }
            }
        };
        for t in &self.terms {
            let ra = *t.a.rotation.matrix();
            let jy = (t.a.rotation * *rx * t.b.rotation).matrix().to_owned();
            let target = t.c.translation - t.a.rotation.rotate(&rx.rotate(&t.b.translation)) - t.a.translation;
            add(&[(0, ra), (3 + 3 * t.group, jy)], target, 1.0);
        }
        for p in &self.points {
            let target = p.c - p.a.rotation.rotate(&rx.rotate(&p.b)) - p.a.translation;
            add(&[(0, *p.a.rotation.matrix())], target, self.point_weight);
        }
        let sol = h
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Degenerate(format!("translation initialisation: {e}")))?;
        let px = Vec3::new(sol[0], sol[1], sol[2]);
        let py = (0..self.groups)
            .map(|g| Vec3::new(sol[3 + 3 * g], sol[4 + 3 * g], sol[5 + 3 * g]))
            .collect();
        Ok((px, py))
    }

    fn polish(&self, x: RigidTransform, ys: Vec<RigidTransform>) -> Result<(RigidTransform, Vec<RigidTransform>, f64)> {
        let obj = ChainObjective {
            problem: self,
            base_x: x.rotation,
            base_y: ys.iter().map(|y| y.rotation).collect(),
            scale: 1.0 / self.sample_count() as f64,
        };
        let mut x0 = vec![0.0; 6 + 6 * self.groups];
        x0[3..6].copy_from_slice(x.translation.as_slice());
        for (g, y) in ys.iter().enumerate() {
            x0[9 + 6 * g..12 + 6 * g].copy_from_slice(y.translation.as_slice());
        }
        let cfg = LbfgsConfig {
            steps: 50,
            ..LbfgsConfig::default()
        };
        let res = lbfgs_minimize(&obj, &x0, &cfg)?;
        let (x, ys) = obj.unpack(&res.x);
        let f = self.objective(&x, &ys);
        if !f.is_finite() {
            return Err(Error::NonConvergence {
                reason: "objective became non-finite".into(),
                last_value: f,
            });
        }
        Ok((x, ys, f))
    }

    /// Multi-start solve. Start 0 initialises `X`'s rotation at identity,
    /// the others at seeded random rotations.
    pub fn solve(&self) -> Result<ChainSolution> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x0ff5e7);
        let starts: Vec<Rotation> = std::iter::once(Rotation::identity())
            .chain((1..MULTI_START).map(|_| random_rotation(&mut rng)))
            .collect();
        let solved: Vec<Result<(RigidTransform, Vec<RigidTransform>, f64)>> = starts
            .par_iter()
            .map(|r0| {
                let (rx, ry) = self.rotation_init(*r0);
                let (px, py) = self.translation_init(&rx)?;
                let x = RigidTransform::new(rx, px);
                let ys = ry.iter().zip(py).map(|(r, p)| RigidTransform::new(*r, p)).collect();
                self.polish(x, ys)
            })
            .collect();
        let mut best: Option<(RigidTransform, Vec<RigidTransform>, f64)> = None;
        let mut last_err = None;
        for s in solved {
            match s {
                Ok(s) if best.as_ref().is_none_or(|b| s.2 < b.2) => best = Some(s),
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
        }
        let Some((x, ys, f)) = best else {
            return Err(last_err.unwrap_or_else(|| Error::invalid("no solver start")));
        };
        let condition = self.condition(&x, &ys);
        if !(condition >= CONDITION_LIMIT) {
            return Err(Error::UnderConstrained(format!(
                "Hessian condition ratio {condition:.3e}: motion does not excite every offset"
            )));
        }
        log::debug!("offset chain: objective {f:.3e}, condition {condition:.3e}");
        Ok(ChainSolution {
            x,
            ys,
            objective: f,
        })
    }

    /// Smallest-to-largest eigenvalue ratio of the (mean) objective's
    /// Hessian at the solution, by central differences of the gradient.
    fn condition(&self, x: &RigidTransform, ys: &[RigidTransform]) -> f64 {
        let obj = ChainObjective {
            problem: self,
            base_x: x.rotation,
            base_y: ys.iter().map(|y| y.rotation).collect(),
            scale: 1.0 / self.sample_count() as f64,
        };
        let n = obj.dimension();
        let mut p = vec![0.0; n];
        p[3..6].copy_from_slice(x.translation.as_slice());
        for (g, y) in ys.iter().enumerate() {
            p[9 + 6 * g..12 + 6 * g].copy_from_slice(y.translation.as_slice());
        }
        let h = 1e-5;
        let mut hess = DMatrix::<f64>::zeros(n, n);
        let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
        for j in 0..n {
            let mut q = p.clone();
            q[j] += h;
            obj.value_and_gradient(&q, &mut gp);
            q[j] -= 2.0 * h;
            obj.value_and_gradient(&q, &mut gm);
            for i in 0..n {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let eig = SymmetricEigen::new(hess).eigenvalues;
        let max = eig.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.iter().cloned().fold(f64::MAX, f64::min);
        if max > 0.0 {
            min / max
        } else {
            0.0
        }
    }
}

impl Objective for ChainObjective<'_> {
    fn dimension(&self) -> usize {
        6 + 6 * self.problem.groups
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let (tx, ys) = self.unpack(x);
        self.problem.objective(&tx, &ys) * self.scale
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (tx, ys) = self.unpack(x);
        let g = self.problem.evaluate(&tx, &ys);
        let s = self.scale;
        let w = exp_vjp(&Vec3::new(x[0], x[1], x[2]), &(self.base_x.matrix().transpose() * g.rx));
        grad[0..3].copy_from_slice((w * s).as_slice());
        grad[3..6].copy_from_slice((g.px * s).as_slice());
        for (k, (dr, dp)) in g.ry.iter().enumerate() {
            let o = 6 + 6 * k;
            let w = exp_vjp(&Vec3::new(x[o], x[o + 1], x[o + 2]), &(self.base_y[k].matrix().transpose() * dr));
            grad[o..o + 3].copy_from_slice((w * s).as_slice());
            grad[o + 3..o + 6].copy_from_slice((dp * s).as_slice());
        }
        g.f * s
    }
}
