//! Forward-pass timing and memory over prompt counts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, MinGroup, DEFAULT_MU};
use crate::data::{PatchFeatureMap, PointPrompt};
use crate::error::{Error, Result};
use crate::model::{forward, RenConfig, RenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub runs: usize,
    pub warmups: usize,
    /// Also time forward followed by aggregation.
    pub with_aggregation: bool,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            runs: 20,
            warmups: 3,
            with_aggregation: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_s: f64,
    /// Sample standard deviation.
    pub std_s: f64,
}

impl Timing {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_s: mean,
            std_s: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub prompts: usize,
    pub runs: usize,
    pub forward: Timing,
    pub with_aggregation: Option<Timing>,
    pub tokens_per_s: f64,
    /// Largest set of simultaneously live inference buffers, in bytes.
    pub buffer_bytes_estimate: u64,
    /// Growth of peak resident memory during the timed runs, where the
    /// platform reports it.
    pub resident_delta_bytes: Option<u64>,
    /// Set when the pass could not run, e.g. allocation failure.
    pub error: Option<String>,
}

/// Live buffers of one inference block plus the shared keys, values,
/// prompt embeddings and outputs.
pub fn buffer_estimate(n: usize, m: usize, config: &RenConfig) -> u64 {
    let d = config.d_model as u64;
    let (n, m) = (n as u64, m as u64);
    let ffn = config.ffn_dim() as u64;
    let per_prompt = 12 * d + 2 * ffn + m + config.encoder_dim as u64;
    4 * (n * per_prompt + 2 * m * d + m * config.encoder_dim as u64)
}

fn status_kb(field: &str) -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    s.lines()
        .find(|l| l.starts_with(field))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// Resets the peak-RSS counter; returns the current RSS in bytes.
fn reset_peak() -> Option<u64> {
    std::fs::write("/proc/self/clear_refs", "5").ok()?;
    status_kb("VmRSS:").map(|k| k * 1024)
}

fn peak_bytes() -> Option<u64> {
    status_kb("VmHWM:").map(|k| k * 1024)
}

fn random_prompts(n: usize, seed: u64) -> Vec<PointPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PointPrompt {
            x: rng.gen_range(0.0..1.0),
            y: rng.gen_range(0.0..1.0),
        })
        .collect()
}

fn bench_one(
    map: &PatchFeatureMap,
    n: usize,
    params: &RenParams<f32>,
    config: &RenConfig,
    settings: &BenchSettings,
) -> Result<BenchReport> {
    let prompts = random_prompts(n, settings.seed ^ n as u64);
    for _ in 0..settings.warmups {
        forward(map, &prompts, params, config)?;
    }
    let base = reset_peak();
    let mut fwd = Vec::with_capacity(settings.runs);
    for _ in 0..settings.runs {
        let t0 = Instant::now();
        std::hint::black_box(forward(map, &prompts, params, config)?);
        fwd.push(t0.elapsed().as_secs_f64());
    }
    let resident = match (base, peak_bytes()) {
        (Some(b), Some(p)) => Some(p.saturating_sub(b)),
        _ => None,
    };
    let with_aggregation = if settings.with_aggregation {
        let mut agg = Vec::with_capacity(settings.runs);
        for _ in 0..settings.runs {
            let t0 = Instant::now();
            let t = forward(map, &prompts, params, config)?;
            std::hint::black_box(aggregate(&t, DEFAULT_MU, MinGroup::Auto)?);
            agg.push(t0.elapsed().as_secs_f64());
        }
        Some(Timing::from_samples(&agg))
    } else {
        None
    };
    let forward = Timing::from_samples(&fwd);
    Ok(BenchReport {
        prompts: n,
        runs: settings.runs,
        tokens_per_s: n as f64 / forward.mean_s,
        forward,
        with_aggregation,
        buffer_bytes_estimate: buffer_estimate(n, map.n_patches(), config),
        resident_delta_bytes: resident,
        error: None,
    })
}

/// Time the forward pass, and optionally forward plus aggregation, for each
/// prompt count. Runs on the calling thread. A failing count is reported in
/// its entry rather than aborting the sweep.
pub fn bench(
    map: &PatchFeatureMap,
    counts: &[usize],
    params: &RenParams<f32>,
    config: &RenConfig,
    settings: &BenchSettings,
) -> Result<Vec<BenchReport>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config("prompt counts must be >= 1".into()));
    }
    if settings.runs == 0 {
        return Err(Error::Config("bench needs at least one timed run".into()));
    }
    let mut out = Vec::with_capacity(counts.len());
    for &n in counts {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            bench_one(map, n, params, config, settings)
        }));
        out.push(match outcome {
            Ok(Ok(r)) => r,
            Ok(Err(e @ Error::Config(_))) | Ok(Err(e @ Error::Validation(_))) => return Err(e),
            Ok(Err(e)) => failed(n, map, config, settings, e.to_string()),
            Err(_) => failed(n, map, config, settings, "pass aborted (allocation failure)".into()),
        });
    }
    Ok(out)
}

fn failed(n: usize, map: &PatchFeatureMap, config: &RenConfig, settings: &BenchSettings, error: String) -> BenchReport {
    BenchReport {
        prompts: n,
        runs: settings.runs,
        forward: Timing { mean_s: 0.0, std_s: 0.0 },
        with_aggregation: None,
        tokens_per_s: 0.0,
        buffer_bytes_estimate: buffer_estimate(n, map.n_patches(), config),
        resident_delta_bytes: None,
        error: Some(error),
    }
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}
