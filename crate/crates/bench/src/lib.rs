//! Forward-pass throughput measurement.
//!
//! Weights and inputs are random: throughput does not depend on their values.
//! Only forward compute is timed, never data preparation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vip_core::zoo::{Model, ViPConfig};
use vip_core::{Result, Tensor};

pub const DEFAULT_BATCH: usize = 32;
pub const MIN_TIMED_ITERS: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub threads: usize,
    pub params: usize,
    /// `batch / mean(iteration time)`.
    pub mean_img_per_s: f64,
    /// Standard deviation of the per-iteration rates.
    pub std_img_per_s: f64,
    pub mean_ms: f64,
}

impl BenchReport {
    /// Coefficient of variation of the per-iteration rates.
    pub fn relative_std(&self) -> f64 {
        self.std_img_per_s / self.mean_img_per_s
    }
}

/// Random `[batch, side, side, channels]` images in `[0, 1)`.
pub fn random_images(config: &ViPConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.image_size;
    Tensor::from_fn([batch, s, s, config.in_channels], |_| rng.random::<f32>())
}

/// Times `iters` evaluation forwards after `warmup` untimed ones.
pub fn throughput(config: &ViPConfig, batch: usize, warmup: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    if iters < MIN_TIMED_ITERS {
        return Err(vip_core::Error::InvalidArgument(format!(
            "at least {MIN_TIMED_ITERS} timed iterations are required, got {iters}"
        )));
    }
    if batch == 0 {
        return Err(vip_core::Error::InvalidArgument("batch must be at least 1".into()));
    }
    let model = Model::<f32>::build(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let images = random_images(config, batch, seed.wrapping_add(1));
    for _ in 0..warmup {
        model.predict(&images)?;
    }
    let mut secs = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = model.predict(&images)?;
        secs.push(t.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean_s = secs.iter().sum::<f64>() / iters as f64;
    let rates: Vec<f64> = secs.iter().map(|s| batch as f64 / s).collect();
    let mean_rate = rates.iter().sum::<f64>() / iters as f64;
    let var = rates.iter().map(|r| (r - mean_rate).powi(2)).sum::<f64>() / (iters - 1) as f64;
    Ok(BenchReport {
        model: config.name.clone(),
        batch,
        warmup_iters: warmup,
        timed_iters: iters,
        threads: vip_core::tensor::worker_threads(),
        params: model.num_params(),
        mean_img_per_s: batch as f64 / mean_s,
        std_img_per_s: var.sqrt(),
        mean_ms: mean_s * 1e3,
    })
}
