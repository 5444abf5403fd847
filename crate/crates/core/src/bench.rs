//! Inference throughput harness.
//!
//! Times [`predict_sequence`] end to end on a fixed random sequence. Input
//! generation and model construction happen before the clock starts.

use std::time::Instant;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::infer::{predict_sequence, InferOptions};
use crate::model::TemporalSegmenter;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_frames: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
    pub infer: InferOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_frames: 300,
            warmup: 2,
            reps: 10,
            seed: 0,
            infer: InferOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_frames: usize,
    pub warmup_reps: usize,
    pub timed_reps: usize,
    pub rep_seconds: Vec<f64>,
    pub median_s: f64,
    pub mean_s: f64,
    /// Sample standard deviation.
    pub stddev_s: f64,
    /// `n_frames / median_s`.
    pub fps: f64,
    pub environment: String,
}

impl BenchReport {
    pub fn from_timings(n_frames: usize, warmup: usize, rep_seconds: Vec<f64>, environment: String) -> Result<Self> {
        if rep_seconds.len() < 3 {
            return Err(Error::Config(format!("need at least 3 timed reps, got {}", rep_seconds.len())));
        }
        let n = rep_seconds.len() as f64;
        let mean = rep_seconds.iter().sum::<f64>() / n;
        let var = rep_seconds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mut sorted = rep_seconds.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        // Timer resolution can make a rep read as 0 on trivial models.
        let median = median.max(1e-9);
        Ok(BenchReport {
            n_frames,
            warmup_reps: warmup,
            timed_reps: rep_seconds.len(),
            rep_seconds,
            median_s: median,
            mean_s: mean,
            stddev_s: var.sqrt(),
            fps: n_frames as f64 / median,
            environment,
        })
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} frames: median {:.4} s, mean {:.4} s, stddev {:.4} s over {} reps -> {:.1} FPS [{}]",
            self.n_frames, self.median_s, self.mean_s, self.stddev_s, self.timed_reps, self.fps, self.environment
        )
    }
}

/// OS, architecture, core count and build profile.
pub fn environment_descriptor() -> String {
    let cores = std::thread::available_parallelism().map_or(0, |n| n.get());
    format!(
        "{}-{} cores={} profile={} introseg={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cores,
        if cfg!(debug_assertions) { "debug" } else { "release" },
        env!("CARGO_PKG_VERSION")
    )
}

/// Deterministic standard-normal sequence used as benchmark input.
pub fn bench_sequence(n_frames: usize, dim: usize, seed: u64) -> Result<EmbeddingSequence> {
    let mut rng = Rng::seed_from_u64(seed);
    let frames = (0..n_frames * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingSequence::new("bench", "bench", 1.0, dim, frames, None)
}

pub fn benchmark(model: &TemporalSegmenter<f32>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_frames == 0 {
        return Err(Error::Config("n_frames must be positive".into()));
    }
    let seq = bench_sequence(cfg.n_frames, model.config().embed_dim, cfg.seed)?;
    for _ in 0..cfg.warmup {
        predict_sequence(model, &seq, &cfg.infer)?;
    }
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let start = Instant::now();
        let out = predict_sequence(model, &seq, &cfg.infer)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    BenchReport::from_timings(cfg.n_frames, cfg.warmup, times, environment_descriptor())
}
