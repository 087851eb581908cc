//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Follows the step semantics of the widely used PyTorch implementation: a
//! *step* runs up to `max_iter` quasi-Newton iterations, and the curvature
//! history carries over between steps.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::objective::{dot, max_abs, Objective};
use super::{Trace, TraceEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub learning_rate: f64,
    pub history_size: usize,
    /// Outer steps.
    pub steps: usize,
    /// Quasi-Newton iterations per step.
    pub max_iter: usize,
    /// Objective evaluations per step; `None` means `1.25 · max_iter`.
    pub max_eval: Option<usize>,
    /// Line-search iterations.
    pub line_search: usize,
    pub c1: f64,
    pub c2: f64,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            learning_rate: 1.0,
            history_size: 10,
            steps: 5,
            max_iter: 20,
            max_eval: None,
            line_search: 20,
            c1: 1e-4,
            c2: 0.9,
            tolerance_grad: 1e-10,
            tolerance_change: 1e-20,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::invalid(format!(
                "line-search constants must satisfy 0 < c1 < c2 < 1 (got {}, {})",
                self.c1, self.c2
            )));
        }
        if !(self.learning_rate > 0.0) || self.history_size == 0 || self.max_iter == 0 || self.line_search == 0 {
            return Err(Error::invalid("L-BFGS learning rate, history, iterations and line search must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub trace: Trace,
    /// Gradient max-norm at `x`.
    pub grad_max: f64,
    pub evaluations: usize,
    /// Set when a line search ran out of iterations or a step was rejected.
    pub warning: Option<String>,
}

struct Eval<'a, O: ?Sized> {
    obj: &'a O,
    count: usize,
}

impl<O: Objective + ?Sized> Eval<'_, O> {
    fn at(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
        self.count += 1;
        let f = self.obj.value_and_gradient(x, g);
        if f.is_nan() || g.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("objective evaluation {}", self.count)));
        }
        Ok(f)
    }
}

pub fn lbfgs_minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult> {
    cfg.validate()?;
    let n = x0.len();
    if n != obj.dimension() {
        return Err(Error::DimensionMismatch {
            what: "L-BFGS start point",
            expected: obj.dimension(),
            got: n,
        });
    }
    let mut ev = Eval { obj, count: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = ev.at(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at the start point".into()));
    }
    let mut trace = Trace::default();
    trace.push(TraceEntry::start(f, max_abs(&g)));
    let mut warning = None;

    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history_size);
    let mut h_diag = 1.0;
    let mut d = vec![0.0; n];
    let mut t = 0.0;
    let mut prev_g = vec![0.0; n];
    let mut total_iter = 0usize;
    let max_eval = cfg.max_eval.unwrap_or(cfg.max_iter * 5 / 4);

    'steps: for _ in 0..cfg.steps {
        if max_abs(&g) <= cfg.tolerance_grad {
            break;
        }
        let eval_start = ev.count;
        let mut n_iter = 0;
        while n_iter < cfg.max_iter {
            n_iter += 1;
            total_iter += 1;
            if total_iter == 1 {
                for i in 0..n {
                    d[i] = -g[i];
                }
                h_diag = 1.0;
            } else {
                let y: Vec<f64> = g.iter().zip(&prev_g).map(|(a, b)| a - b).collect();
                let s: Vec<f64> = d.iter().map(|v| v * t).collect();
                let ys = dot(&y, &s);
                if ys > 1e-10 {
                    if hist.len() == cfg.history_size {
                        hist.pop_front();
                    }
                    h_diag = ys / dot(&y, &y);
                    hist.push_back((s, y, 1.0 / ys));
                }
                // Two-loop recursion.
                let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
                let mut alpha = vec![0.0; hist.len()];
                for (k, (s, y, rho)) in hist.iter().enumerate().rev() {
                    alpha[k] = rho * dot(s, &q);
                    for i in 0..n {
                        q[i] -= alpha[k] * y[i];
                    }
                }
                for v in q.iter_mut() {
                    *v *= h_diag;
                }
                for (k, (s, y, rho)) in hist.iter().enumerate() {
                    let beta = rho * dot(y, &q);
                    for i in 0..n {
                        q[i] += s[i] * (alpha[k] - beta);
                    }
                }
                d = q;
            }
            prev_g.copy_from_slice(&g);

            t = if total_iter == 1 {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / l1) * cfg.learning_rate
            } else {
                cfg.learning_rate
            };
            let gtd = dot(&g, &d);
            if gtd > -cfg.tolerance_change {
                break 'steps;
            }

            let ls = strong_wolfe(&mut ev, &x, t, &d, f, &g, gtd, cfg)?;
            let mut note = None;
            let decrease = ls.decrease;
            if ls.decrease <= 0.0 && ls.f.is_finite() {
                t = ls.t;
                for i in 0..n {
                    x[i] += t * d[i];
                }
                f = ls.f;
                g = ls.g;
                if !ls.wolfe {
                    note = Some("accepted step does not satisfy the curvature condition".to_string());
                }
            } else {
                note = Some("line search found no decrease; step rejected".to_string());
                warning.get_or_insert_with(|| "line search failed to find a decrease".to_string());
                trace.push(TraceEntry {
                    iteration: total_iter,
                    value: f,
                    grad_max: max_abs(&g),
                    step: 0.0,
                    evaluations: ls.evals,
                    note,
                });
                break 'steps;
            }
            if ls.exhausted {
                warning.get_or_insert_with(|| format!("line search hit its {}-iteration cap", cfg.line_search));
            }
            let gmax = max_abs(&g);
            trace.push(TraceEntry {
                iteration: total_iter,
                value: f,
                grad_max: gmax,
                step: t,
                evaluations: ls.evals,
                note,
            });

            if gmax <= cfg.tolerance_grad {
                break 'steps;
            }
            if ev.count - eval_start >= max_eval {
                break;
            }
            if max_abs(&d) * t.abs() <= cfg.tolerance_change || decrease.abs() < cfg.tolerance_change {
                break 'steps;
            }
        }
    }
    let grad_max = max_abs(&g);
    Ok(LbfgsResult {
        x,
        f,
        trace,
        grad_max,
        evaluations: ev.count,
        warning,
    })
}

struct LineSearch {
    /// Estimated `f(t) − f(0)`.
    decrease: f64,
    t: f64,
    f: f64,
    g: Vec<f64>,
    evals: usize,
    wolfe: bool,
    exhausted: bool,
}

#[derive(Clone)]
struct Point {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Absolute size of rounding noise in an objective value near `f`.
fn rounding_level(f: f64) -> f64 {
    64.0 * f64::EPSILON * f.abs().max(f64::MIN_POSITIVE)
}

/// `φ(b) − φ(a)` along the search line. When the values differ by less than
/// their rounding noise the trapezoid rule on the directional derivatives is
/// used instead, which is exact for quadratics and keeps the search making
/// progress where function values have gone flat.
fn change(a: &Point, b: &Point, noise: f64) -> f64 {
    let df = b.f - a.f;
    if df.abs() > noise || !df.is_finite() {
        df
    } else {
        0.5 * (b.t - a.t) * (a.gtd + b.gtd)
    }
}

/// Minimizer of the cubic interpolating two points with derivatives,
/// clamped to `bounds`.
fn cubic_interpolate(a: &Point, b: &Point, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if a.t <= b.t { (a.t, b.t) } else { (b.t, a.t) });
    let d1 = a.gtd + b.gtd - 3.0 * (a.f - b.f) / (a.t - b.t);
    let d2_sq = d1 * d1 - a.gtd * b.gtd;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if a.t <= b.t {
            b.t - (b.t - a.t) * ((b.gtd + d2 - d1) / (b.gtd - a.gtd + 2.0 * d2))
        } else {
            a.t - (a.t - b.t) * ((a.gtd + d2 - d1) / (a.gtd - b.gtd + 2.0 * d2))
        };
        if pos.is_finite() {
            return pos.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<O: Objective + ?Sized>(
    ev: &mut Eval<'_, O>,
    x: &[f64],
    mut t: f64,
    d: &[f64],
    f: f64,
    g: &[f64],
    gtd: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearch> {
    let n = x.len();
    let d_norm = max_abs(d);
    let mut xt = vec![0.0; n];
    let mut probe = |ev: &mut Eval<'_, O>, t: f64| -> Result<Point> {
        for i in 0..n {
            xt[i] = x[i] + t * d[i];
        }
        let mut gn = vec![0.0; n];
        let fnew = ev.at(&xt, &mut gn)?;
        let gtd = dot(&gn, d);
        Ok(Point { t, f: fnew, g: gn, gtd })
    };
    let start_evals = ev.count;
    let noise = rounding_level(f);
    let origin = Point { t: 0.0, f, g: Vec::new(), gtd };
    let armijo = |p: &Point| change(&origin, p, noise) <= cfg.c1 * p.t * gtd;
    let worse = |a: &Point, b: &Point| change(b, a, noise) >= 0.0;
    let curvature = |p: &Point| p.gtd.abs() <= -cfg.c2 * gtd;

    let mut new = probe(ev, t)?;
    let mut prev = Point { t: 0.0, f, g: g.to_vec(), gtd };
    let mut bracket: Vec<Point>;
    let mut done = false;
    let mut ls_iter = 0;
    loop {
        if ls_iter >= cfg.line_search {
            bracket = vec![Point { t: 0.0, f, g: g.to_vec(), gtd }, new];
            break;
        }
        if !new.f.is_finite() || !armijo(&new) || (ls_iter > 1 && worse(&new, &prev)) {
            bracket = vec![prev, new];
            break;
        }
        if curvature(&new) {
            bracket = vec![new];
            done = true;
            break;
        }
        if new.gtd >= 0.0 {
            bracket = vec![prev, new];
            break;
        }
        let min_step = new.t + 0.01 * (new.t - prev.t);
        let max_step = new.t * 10.0;
        let next_t = cubic_interpolate(&prev, &new, Some((min_step, max_step)));
        prev = new;
        t = next_t;
        new = probe(ev, t)?;
        ls_iter += 1;
    }

    // Zoom.
    let mut insufficient = false;
    let order = |b: &[Point]| if worse(&b[0], &b[1]) { (1, 0) } else { (0, 1) };
    let (mut low, mut high) = if bracket.len() == 2 { order(&bracket) } else { (0, 0) };
    while !done && ls_iter < cfg.line_search {
        let (b0, b1) = (&bracket[0], &bracket[1]);
        if (b1.t - b0.t).abs() * d_norm < cfg.tolerance_change {
            break;
        }
        let non_finite = !b0.f.is_finite() || !b1.f.is_finite();
        let bmax = b0.t.max(b1.t);
        let bmin = b0.t.min(b1.t);
        let mut tz = if non_finite { 0.5 * (bmin + bmax) } else { cubic_interpolate(b0, b1, None) };
        let eps = 0.1 * (bmax - bmin);
        if (bmax - tz).min(tz - bmin) < eps {
            if insufficient || tz >= bmax || tz <= bmin {
                tz = if (tz - bmax).abs() < (tz - bmin).abs() { bmax - eps } else { bmin + eps };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let p = probe(ev, tz)?;
        ls_iter += 1;
        if !p.f.is_finite() || !armijo(&p) || worse(&p, &bracket[low]) {
            bracket[high] = p;
            (low, high) = order(&bracket);
        } else {
            if curvature(&p) {
                done = true;
            } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = p;
        }
    }
    let best = bracket.swap_remove(low);
    let wolfe = armijo(&best) && curvature(&best);
    Ok(LineSearch {
        decrease: change(&origin, &best, noise),
        t: best.t,
        f: best.f,
        g: best.g,
        evals: ev.count - start_evals,
        wolfe,
        exhausted: !done && ls_iter >= cfg.line_search,
    })
}
