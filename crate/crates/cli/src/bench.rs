use clap::Args;
use geolang::timing::{attention_overhead, BenchReport, BenchSpec};

use crate::{CmdResult, Failure};

#[derive(Args)]
pub struct BenchArgs {
    /// Token count H*W; must be a perfect square.
    #[arg(long, default_value_t = 676)]
    hw: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Time both paths (the default).
    #[arg(long, conflicts_with = "no_prior")]
    #[allow(dead_code)]
    with_prior: bool,
    /// Time plain attention only.
    #[arg(long)]
    no_prior: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

fn print_table(r: &BenchReport) {
    println!(
        "attention at N={} ({}x{} grid), C={}, {} heads, {} iters; relations precomputed in {:.3} ms",
        r.tokens, r.grid, r.grid, r.channels, r.heads, r.iters, r.precompute_ms
    );
    println!("{:<7} {:>12} {:>12}", "path", "median_ms", "p95_ms");
    println!("{:<7} {:>12.4} {:>12.4}", "plain", r.plain.median_ms, r.plain.p95_ms);
    if let Some(p) = &r.prior {
        println!("{:<7} {:>12.4} {:>12.4}", "prior", p.median_ms, p.p95_ms);
    }
    if let (Some(o), Some((lo, hi))) = (r.overhead_pct, r.noise_band_pct) {
        println!("overhead {o:.1}% (noise band {lo:.1}% to {hi:.1}%)");
    }
}

pub fn run(a: BenchArgs) -> CmdResult {
    if a.channels == 0 || a.heads == 0 || a.channels % a.heads != 0 {
        return Err(Failure::Usage(format!("--channels {} must be a positive multiple of --heads {}", a.channels, a.heads)));
    }
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let spec = BenchSpec {
        tokens: a.hw,
        channels: a.channels,
        heads: a.heads,
        iters: a.iters,
        with_prior: !a.no_prior,
        seed: a.seed,
    };
    let report = attention_overhead(&spec)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    } else {
        print_table(&report);
    }
    Ok(())
}
