//! Runs the whole pipeline in memory on a regime-shift task and inspects
//! one fused forecast: base, memory candidates, attention and gate.
//!
//!     cargo run --release --example adaptive_fusion

use memforecast::pipeline::experiment::{base_outputs, branch_outputs, synthesize};
use memforecast::pipeline::{run_pipeline, RunConfig};

fn main() -> memforecast::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    let out = run_pipeline(&cfg, &synthesize(&cfg)?)?;
    let e = &out.evaluation;
    println!("base MSE {:.4}  fused MSE {:.4}  ratio {:.3}", e.base.mse, e.fused.mse, e.relative_mse);
    println!("base forecaster unchanged: {}", out.base_checksum.0 == out.base_checksum.1);

    let pair = &out.dataset.test[0..1];
    let base = base_outputs(&out.forecaster, pair)?;
    let branches = branch_outputs(&out.kpm.model, &out.kpm.encoder, pair)?;
    let m = out.kpm.model.config.branches;
    let k = cfg.fusion_candidates();
    let candidates: Vec<Vec<f64>> = (0..k).map(|i| branches.row(i).to_vec()).collect();
    debug_assert!(k <= m);
    let bundle = out.fusion.model.fuse(base.row(0), &candidates, None)?;

    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(" ");
    println!("target     {}", fmt(pair[0].value.data()));
    println!("base       {}", fmt(&bundle.base));
    println!("fused      {}", fmt(&bundle.fused));
    println!("correction {}", fmt(&bundle.correction));
    println!("weights    {}", fmt(&bundle.weights));
    println!("gate       {}", fmt(&bundle.gate_snapshot));
    Ok(())
}
