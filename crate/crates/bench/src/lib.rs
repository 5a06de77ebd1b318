//! Shared fixtures for the benchmarks.

use c2f_core::data::{synth_generate, SynthConfig};
use c2f_core::trainer::RunConfig;
use c2f_core::{Model, Tensor};

/// Default run-config model with one synthetic clip batch of `batch` samples.
pub fn head_fixture(batch: usize) -> (RunConfig, Model, Vec<Tensor>, Vec<f64>) {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model.clone(), 0).expect("default model");
    let synth = SynthConfig {
        samples: batch,
        clips: cfg.model.train_clips,
        ..cfg.data.synth.clone()
    };
    let ds = synth_generate(&synth).expect("synthetic batch");
    let clips = ds
        .samples
        .iter()
        .map(|s| s.to_tensor(ds.clip_dim).expect("sized"))
        .collect();
    let targets = ds
        .scores()
        .iter()
        .map(|s| s * cfg.grading.score_max / synth.score_max)
        .collect();
    (cfg, model, clips, targets)
}

/// A pseudo-random permutation-like score vector of length `n`.
pub fn scores(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| ((i.wrapping_mul(2654435761) ^ salt) % 1_000_003) as f64)
        .collect()
}
