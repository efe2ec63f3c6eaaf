//! Forward-pass timing.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{build_pyramid, Model, PyramidInput};
use crate::rng::Rng;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub iters: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

impl TimingStats {
    /// Median of an even count is the mean of the middle pair; p95 is nearest-rank.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("no timing samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(TimingStats {
            iters: n,
            min_s: s[0],
            median_s: median,
            p95_s: s[rank - 1],
            max_s: s[n - 1],
        })
    }
}

/// Random `(1, 3, h, w)` input for timing.
pub fn bench_input(h: usize, w: usize, seed: u64) -> Result<PyramidInput> {
    build_pyramid(&Rng::new(seed).uniform_tensor(Shape::new(1, 3, h, w), 0.0, 1.0))
}

/// Wall time of one no-grad forward, in seconds.
pub fn time_forward(model: &Model, input: &PyramidInput) -> Result<f64> {
    let started = Instant::now();
    let out = model.infer(input)?;
    std::hint::black_box(&out);
    Ok(started.elapsed().as_secs_f64())
}

pub fn bench_forward(model: &Model, input: &PyramidInput, warmup: usize, iters: usize) -> Result<TimingStats> {
    if iters == 0 {
        return Err(Error::Config("`iters` must be at least 1".into()));
    }
    for _ in 0..warmup {
        time_forward(model, input)?;
    }
    let samples = (0..iters).map(|_| time_forward(model, input)).collect::<Result<Vec<_>>>()?;
    TimingStats::from_samples(&samples)
}

/// OS, architecture, thread count and CPU model when known.
pub fn host_description() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {} / {cpu} / {threads} threads / rayon {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}
