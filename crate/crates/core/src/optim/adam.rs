use serde::{Deserialize, Serialize};

use super::objective::{max_abs, Objective};
use super::{Trace, TraceEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 100,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("Adam learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam moment decay rates must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamResult {
    /// Lowest-objective iterate.
    pub x: Vec<f64>,
    pub f: f64,
    pub trace: Trace,
}

/// Runs exactly `cfg.iterations` bias-corrected Adam updates and returns
/// the best iterate seen, including the start and the final point.
pub fn adam_minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &AdamConfig) -> Result<AdamResult> {
    cfg.validate()?;
    let n = x0.len();
    if n != obj.dimension() {
        return Err(Error::DimensionMismatch {
            what: "Adam start point",
            expected: obj.dimension(),
            got: n,
        });
    }
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_f = f64::INFINITY;
    let mut trace = Trace::default();
    let (mut b1t, mut b2t) = (1.0, 1.0);

    for it in 0..cfg.iterations {
        let f = obj.value_and_gradient(&x, &mut g);
        if f.is_nan() || g.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite(format!("Adam objective at iteration {it}")));
        }
        if f < best_f {
            best_f = f;
            best_x.copy_from_slice(&x);
        }
        trace.push(TraceEntry {
            iteration: it,
            value: f,
            grad_max: max_abs(&g),
            step: cfg.learning_rate,
            evaluations: 1,
            note: None,
        });
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        let step = cfg.learning_rate / (1.0 - b1t);
        let vc = 1.0 / (1.0 - b2t);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= step * m[i] / ((v[i] * vc).sqrt() + cfg.eps);
        }
    }
    let f = obj.value_and_gradient(&x, &mut g);
    if f.is_nan() {
        return Err(Error::NonFinite(format!("Adam objective at iteration {}", cfg.iterations)));
    }
    if f < best_f {
        best_f = f;
        best_x.copy_from_slice(&x);
    }
    trace.push(TraceEntry {
        iteration: cfg.iterations,
        value: f,
        grad_max: max_abs(&g),
        step: 0.0,
        evaluations: 1,
        note: Some("final iterate".into()),
    });
    Ok(AdamResult {
        x: best_x,
        f: best_f,
        trace,
    })
}
