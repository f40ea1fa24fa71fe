//! Times the memory module against nearest-neighbour retrieval as the
//! knowledge base grows.
//!
//!     cargo run --release --example latency_benchmark

use memforecast::pipeline::stages::run_bench;
use memforecast::pipeline::RunConfig;

fn main() -> memforecast::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/bench.toml"))?;
    cfg.bench.kb_sizes = vec![1_000, 5_000, 20_000];
    cfg.bench.reps = 5;
    let (report, _raw) = run_bench(&cfg)?;
    println!("K={} V={} d={} batch={}", report.key_len, report.horizon, report.latent_dim, report.batch);
    println!("{:>8} {:>6} {:>12} {:>12} {:>12} {:>8}", "entries", "cells", "memory ms", "retrieval ms", "scan ms", "speedup");
    for s in &report.sizes {
        println!(
            "{:>8} {:>6} {:>12.3} {:>12.3} {:>12.3} {:>7.2}x",
            s.kb_size,
            s.n_cells,
            s.kpm_mean_ms,
            s.rag_mean_ms,
            s.brute_mean_ms.unwrap_or(f64::NAN),
            s.speedup
        );
    }
    Ok(())
}
