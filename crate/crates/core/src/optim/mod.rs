//! Unconstrained first- and quasi-second-order minimizers over flat
//! parameter vectors.

mod adam;
mod lbfgs;
mod objective;

pub use adam::{adam_minimize, AdamConfig, AdamResult};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult};
pub use objective::{central_differences, check_gradient, FnObjective, Objective, Restricted};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub grad_max: f64,
    pub step: f64,
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TraceEntry {
    fn start(value: f64, grad_max: f64) -> Self {
        TraceEntry {
            iteration: 0,
            value,
            grad_max,
            step: 0.0,
            evaluations: 1,
            note: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, e: TraceEntry) {
        self.entries.push(e);
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.value)
    }

    pub fn first_value(&self) -> Option<f64> {
        self.entries.first().map(|e| e.value)
    }

    pub fn last_value(&self) -> Option<f64> {
        self.entries.last().map(|e| e.value)
    }

    /// Running minimum of the recorded values.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.values()
            .map(|v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}
