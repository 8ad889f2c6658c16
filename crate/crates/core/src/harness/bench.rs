//! Wall-clock throughput benchmark: warmup iterations followed by timed
//! forward passes on one fixed random input at batch size 1.

use std::time::Instant;

use serde::Serialize;

use super::HarnessError;
use crate::model::{Model, ModelMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub config_hash: String,
    pub mode: String,
    /// Keep ratio for pruning, merge fraction for merging, 1.0 for dense.
    pub keep_ratio: f64,
    pub imgs_per_sec_mean: f64,
    pub imgs_per_sec_std: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_p50: f64,
    pub latency_ms_p90: f64,
    pub latency_ms_p99: f64,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub threads: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

/// Time `iters` forward passes after `warmup` untimed ones. The input is a
/// single random image created before warmup; data generation never counts
/// toward the timing.
pub fn bench_throughput(
    model: &Model,
    mode: &ModelMode,
    image_hw: (usize, usize),
    warmup: usize,
    iters: usize,
    config_hash: &str,
    rng: &mut Rng,
) -> Result<BenchResult, HarnessError> {
    if iters == 0 {
        return Err(HarnessError::Config("bench needs at least one timed iteration".into()));
    }
    let (h, w) = image_hw;
    let input = Tensor::new(
        (0..3 * h * w).map(|_| rng.normal_f32()).collect(),
        vec![3, h, w],
    );
    for _ in 0..warmup {
        model.forward_infer(&input, mode)?;
    }
    let mut lat = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let out = model.forward_infer(&input, mode)?;
        lat.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out.final_tokens.data()[0]);
    }
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    let rates: Vec<f64> = lat.iter().map(|&l| 1.0 / l).collect();
    let rate_mean = 1.0 / mean;
    let rate_var = rates.iter().map(|r| (r - rate_mean) * (r - rate_mean)).sum::<f64>()
        / rates.len() as f64;
    let mut sorted = lat.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mode_name, ratio) = match mode {
        ModelMode::Dense => ("none".to_string(), 1.0),
        ModelMode::Prune(s) => ("prune".to_string(), s.base_ratio),
        ModelMode::ToMe { scope, fraction } => (
            match scope {
                crate::tome::ToMeScope::Mhsa => "tome_mhsa".to_string(),
                crate::tome::ToMeScope::MhsaMlp => "tome_mhsa_mlp".to_string(),
            },
            *fraction as f64,
        ),
    };
    Ok(BenchResult {
        config_hash: config_hash.to_string(),
        mode: mode_name,
        keep_ratio: ratio,
        imgs_per_sec_mean: rate_mean,
        imgs_per_sec_std: rate_var.sqrt(),
        latency_ms_mean: mean * 1e3,
        latency_ms_p50: percentile(&sorted, 0.50) * 1e3,
        latency_ms_p90: percentile(&sorted, 0.90) * 1e3,
        latency_ms_p99: percentile(&sorted, 0.99) * 1e3,
        warmup_iters: warmup,
        timed_iters: iters,
        threads: rayon::current_num_threads(),
    })
}
