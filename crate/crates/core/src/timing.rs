//! Wall-clock comparison of plain and geometry-prior attention.
//!
//! The relation matrices are built once per run. Each prior-path iteration
//! re-fuses them with the current lambdas, rebuilds the per-head decay masks
//! and runs masked attention, as each block of the model does per forward.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dggm::{depth_relation, geo_attention_forward_grid, plain_attention_forward, pool_depth, spatial_relation};
use crate::dggm::{AttentionOptions, DecaySchedule, GeoAttentionParams, GeometryPrior};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSpec {
    /// Token count; must be a perfect square.
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub iters: usize,
    pub with_prior: bool,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            tokens: 676,
            channels: 32,
            heads: 2,
            iters: 100,
            with_prior: true,
            seed: 0,
        }
    }
}

/// Per-iteration wall time in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
}

impl TimingStats {
    fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        TimingStats {
            median_ms: percentile(&s, 0.5),
            p95_ms: percentile(&s, 0.95),
            min_ms: s[0],
        }
    }
}

/// Nearest-rank percentile of sorted, non-empty data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub tokens: usize,
    pub grid: usize,
    pub channels: usize,
    pub heads: usize,
    pub iters: usize,
    /// One-off cost of the depth and spatial relation matrices.
    pub precompute_ms: f64,
    pub plain: TimingStats,
    pub prior: Option<TimingStats>,
    /// `median(prior) / median(plain) - 1`, in percent.
    pub overhead_pct: Option<f64>,
    /// Smallest and largest overhead over up to five consecutive slices of
    /// the run; the spread between repeated measurements.
    pub noise_band_pct: Option<(f64, f64)>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn overhead(plain: &[f64], prior: &[f64]) -> f64 {
    (TimingStats::of(prior).median_ms / TimingStats::of(plain).median_ms - 1.0) * 100.0
}

/// Runs the benchmark in f32. Plain and prior iterations alternate so that
/// drift in machine load hits both equally.
pub fn attention_overhead(spec: &BenchSpec) -> Result<BenchReport> {
    let grid = (spec.tokens as f64).sqrt().round() as usize;
    if grid == 0 || grid * grid != spec.tokens {
        return Err(Error::Config(format!("token count {} is not a positive square", spec.tokens)));
    }
    if spec.iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = GeoAttentionParams::<f32>::random(spec.channels, spec.heads, 1.0 / (spec.channels as f64).sqrt(), &mut rng)?;
    let x = Tensor::<f32>::from_fn(&[spec.tokens, spec.channels], |_| rng.random_range(-1.0..1.0));
    let depth = Tensor::<f32>::from_fn(&[grid * 2, grid * 2], |_| rng.random_range(0.4..1.2));
    let opts = AttentionOptions::default();
    let sched = DecaySchedule::geometric(spec.heads);

    let t = Instant::now();
    let patches = pool_depth(&depth, grid, grid)?;
    let delta_d = Arc::new(depth_relation(&patches));
    let delta_s = Arc::new(spatial_relation::<f32>(grid, grid));
    let precompute_ms = ms_since(t);

    let run_plain = || -> Result<f64> {
        let t = Instant::now();
        std::hint::black_box(plain_attention_forward(&x, &params, opts)?);
        Ok(ms_since(t))
    };
    let run_prior = || -> Result<f64> {
        let t = Instant::now();
        let prior = GeometryPrior::new(Arc::clone(&delta_d), Arc::clone(&delta_s), 0.3, 0.7)?;
        std::hint::black_box(geo_attention_forward_grid(&x, &params, &patches, prior, &sched, opts)?);
        Ok(ms_since(t))
    };

    // One warm-up pass of each.
    run_plain()?;
    if spec.with_prior {
        run_prior()?;
    }
    let (mut plain, mut prior) = (Vec::with_capacity(spec.iters), Vec::with_capacity(spec.iters));
    for _ in 0..spec.iters {
        plain.push(run_plain()?);
        if spec.with_prior {
            prior.push(run_prior()?);
        }
    }

    let (prior_stats, overhead_pct, noise_band_pct) = if spec.with_prior {
        let slices = spec.iters.min(5);
        let per = spec.iters / slices;
        let band = (0..slices)
            .map(|k| {
                let r = k * per..if k + 1 == slices { spec.iters } else { (k + 1) * per };
                overhead(&plain[r.clone()], &prior[r])
            })
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (Some(TimingStats::of(&prior)), Some(overhead(&plain, &prior)), Some(band))
    } else {
        (None, None, None)
    };
    Ok(BenchReport {
        tokens: spec.tokens,
        grid,
        channels: spec.channels,
        heads: spec.heads,
        iters: spec.iters,
        precompute_ms,
        plain: TimingStats::of(&plain),
        prior: prior_stats,
        overhead_pct,
        noise_band_pct,
    })
}
