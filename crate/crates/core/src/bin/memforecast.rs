use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memforecast::pipeline::{run_stage, RunConfig, Stage, StageOptions};
use memforecast::Error;

#[derive(Parser)]
#[command(name = "memforecast", version, about = "Parametric memory for frozen time-series forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the run directory
    Synth(Common),
    /// Fit the frozen base forecaster and index the training windows
    BuildKb(Common),
    /// Train the memory module
    TrainKpm(Common),
    /// Train the fusion head on top of the frozen base and memory
    TrainFusion(Common),
    /// Forecast the test split and write metrics
    Forecast(Common),
    /// Memory-module vs retrieval latency benchmark
    Bench(Common),
    /// Top-k, loss and gating ablations
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Memory candidates consumed by fusion (and retrieved per query in bench)
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    plot_data: bool,
}

fn stage_and_args(cmd: Command) -> (Stage, Common) {
    match cmd {
        Command::Synth(a) => (Stage::Synth, a),
        Command::BuildKb(a) => (Stage::BuildKb, a),
        Command::TrainKpm(a) => (Stage::TrainKpm, a),
        Command::TrainFusion(a) => (Stage::TrainFusion, a),
        Command::Forecast(a) => (Stage::Forecast, a),
        Command::Bench(a) => (Stage::Bench, a),
        Command::Ablate(a) => (Stage::Ablate, a),
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("MEMFORECAST_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MEMFORECAST_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::State(e.to_string()))
}

fn run(stage: Stage, args: Common) -> Result<(), Error> {
    configure_threads()?;
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(k) = args.k {
        cfg.fusion.candidates = Some(k);
        cfg.bench.k = k;
    }
    cfg.validate()?;
    let output = run_stage(stage, &cfg, &StageOptions { plot_data: args.plot_data })?;
    println!("{}", serde_json::to_string(&output)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = stage_and_args(cli.command);
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let path = match &e {
                Error::MissingArtifact(p) | Error::Exists(p) => Some(p.display().to_string()),
                _ => None,
            };
            let record = serde_json::json!({ "stage": stage.as_str(), "error": e.kind(), "message": e.to_string(), "path": path });
            eprintln!("{record}");
            let code = match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                Error::MissingArtifact(_) => 3,
                Error::Incompatible(_) => 4,
                Error::Exists(_) => 5,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
