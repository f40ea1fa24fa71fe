//! The three ablations on a small configuration: how many memory
//! candidates fusion sees, which loss trains the memory, and whether the
//! gate helps when half of the memory is noise.
//!
//!     cargo run --release --example ablations

use memforecast::pipeline::ablation::{gating_ablation, loss_ablation, topk_sweep};
use memforecast::pipeline::experiment::synthesize;
use memforecast::pipeline::{run_pipeline, RunConfig};

fn main() -> memforecast::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    let out = run_pipeline(&cfg, &synthesize(&cfg)?)?;
    let ks: Vec<usize> = (1..=cfg.kpm.branches).collect();

    println!("top-k");
    for r in topk_sweep(&cfg, &out.dataset, &out.forecaster, &out.kpm.model, &out.kpm.encoder, &ks)? {
        println!("  k={} mse {:.4} mae {:.4} vs k=1 {:.3}", r.k, r.mse, r.mae, r.relative_mse);
    }

    let loss = loss_ablation(&cfg, &out.dataset, &out.forecaster)?;
    println!("loss");
    for arm in [&loss.perm, &loss.mse] {
        println!("  {:<5} fused mse {:.4} diversity {:.3}", arm.loss.as_str(), arm.fused.mse, arm.diversity);
    }

    let g = gating_ablation(&cfg, &out.dataset, &out.forecaster, 0.5)?;
    println!("gating with {:.0}% noisy memory", g.noise_fraction * 100.0);
    println!("  gated {:.4} ungated {:.4} base {:.4}", g.gated.mse, g.ungated.mse, g.base.mse);
    Ok(())
}
