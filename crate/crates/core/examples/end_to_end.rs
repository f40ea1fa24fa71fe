//! Drives the on-disk stages exactly as the command-line tool does, in a
//! scratch directory, then prints the artifacts each stage left behind.
//!
//!     cargo run --release --example end_to_end [out-dir]

use memforecast::pipeline::{run_stage, RunConfig, RunDir, Stage, StageOptions};

fn main() -> memforecast::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/quick.toml"))?;
    cfg.out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("memforecast-end-to-end"));
    let opts = StageOptions { plot_data: true };

    for stage in [Stage::Synth, Stage::BuildKb, Stage::TrainKpm, Stage::TrainFusion, Stage::Forecast, Stage::Ablate] {
        let output = run_stage(stage, &cfg, &opts)?;
        println!("{stage:<12} {}", output.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    let metrics = std::fs::read_to_string(RunDir::new(&cfg.out).metrics())?;
    println!("{metrics}");
    Ok(())
}
