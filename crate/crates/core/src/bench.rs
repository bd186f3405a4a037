//! Batch-1 inference latency and model size.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{encoded_len, Model};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub param_count: usize,
    pub file_size_bytes: usize,
    pub latency_median_ms: f64,
    pub latency_mean_ms: f64,
    /// Sample standard deviation; 0 for a single run.
    pub latency_stddev_ms: f64,
    pub runs: usize,
    pub warmup: usize,
    pub input_size: usize,
    pub host: String,
    pub samples_ms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(samples: &[f64]) -> Result<Summary> {
    if samples.is_empty() {
        return Err(Error::config("no samples to summarize"));
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = samples.iter().sum::<f64>() / n as f64;
    let stddev = if n > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        median,
        mean,
        stddev,
        min: sorted[0],
        max: sorted[n - 1],
    })
}

pub fn host_description() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {}, {cpus} logical CPU(s)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times `runs` single-image forward passes at `input_size` after `warmup`
/// discarded passes. No tape gradients are recorded.
pub fn bench_latency(model: &Model, name: &str, input_size: usize, runs: usize, warmup: usize) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::config("runs must be at least 1"));
    }
    let sized = if input_size == model.input_size() {
        model.clone()
    } else {
        model.with_input_size(input_size)?
    };
    let image = Tensor::full([1, 3, input_size, input_size], 0.5);
    let mut tape = Tape::new();
    let once = |tape: &mut Tape| -> Result<f64> {
        tape.reset();
        let start = Instant::now();
        let out = sized.forward(tape, &image, false)?;
        std::hint::black_box(tape.value(out.logits)?);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..warmup {
        once(&mut tape)?;
    }
    let samples = (0..runs).map(|_| once(&mut tape)).collect::<Result<Vec<f64>>>()?;
    let s = summarize(&samples)?;
    Ok(BenchReport {
        model: name.to_string(),
        param_count: model.param_count(),
        file_size_bytes: encoded_len(model),
        latency_median_ms: s.median,
        latency_mean_ms: s.mean,
        latency_stddev_ms: s.stddev,
        runs,
        warmup,
        input_size,
        host: host_description(),
        samples_ms: samples,
    })
}
