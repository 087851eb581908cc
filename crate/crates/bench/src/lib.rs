//! Shared fixtures for the benchmarks.

use emfuse::pipeline::SequenceInput;
use emfuse::synth::{simulate_capture, NoiseSpec, ScenarioConfig, SyntheticCapture};

/// A walking capture with the given noise.
pub fn capture(duration: f64, noise: NoiseSpec, seed: u64) -> SyntheticCapture {
    simulate_capture(&ScenarioConfig {
        duration,
        noise,
        seed,
        ..ScenarioConfig::default()
    })
    .expect("valid scenario")
}

/// Solver input with the planted (exact) calibration.
pub fn input(cap: &SyntheticCapture) -> SequenceInput<'_> {
    SequenceInput {
        beta: &cap.beta,
        em: &cap.em,
        frames: &cap.frames,
        anchors: &cap.anchors,
        source_anchor: &cap.source_anchor,
    }
}
