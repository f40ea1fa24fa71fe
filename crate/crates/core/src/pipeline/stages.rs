//! On-disk stages: each reads its prerequisites from the run directory and
//! writes self-describing artifacts back into it.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::data::normalize::save_stats;
use crate::data::windows::window_starts;
use crate::data::{load_csv, normalize, SplitSpec, SynthKind, TimeSeries, WindowPair};
use crate::data::synth::write_long_csv;
use crate::error::{Error, Result};
use crate::eval::{bench_latency, index_family, write_raw_csv, BenchOptions, LatencyReport};
use crate::forecasters::{BaseForecaster, Forecaster};
use crate::fusion::{load_fusion, predict_fusion, save_fusion, FusionModel};
use crate::index::{EntrySource, KeyEncoder, MemoryIndex};
use crate::kpm::{load_kpm, save_kpm, KpmModel};
use crate::numerics::RngState;
use crate::persist::TOOL_VERSION;
use crate::pipeline::ablation::{gating_ablation, loss_ablation, topk_sweep};
use crate::pipeline::config::{RunConfig, Study};
use crate::pipeline::experiment::{
    evaluate, fit_forecaster, fusion_data, init_memory, prepare_dataset, synthesize, train_fusion_stage, train_memory, Dataset,
    Evaluation,
};

/// Diagnostic bundles written by `forecast`.
const DIAGNOSTIC_SAMPLES: usize = 64;
const BENCH_SERIES_LEN: usize = 5_000;
const ENCODE_CHUNK: usize = 4_096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    BuildKb,
    TrainKpm,
    TrainFusion,
    Forecast,
    Bench,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Synth, Stage::BuildKb, Stage::TrainKpm, Stage::TrainFusion, Stage::Forecast, Stage::Bench, Stage::Ablate];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildKb => "build-kb",
            Stage::TrainKpm => "train-kpm",
            Stage::TrainFusion => "train-fusion",
            Stage::Forecast => "forecast",
            Stage::Bench => "bench",
            Stage::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.file("data.csv")
    }
    pub fn stats(&self) -> PathBuf {
        self.file("norm_stats.json")
    }
    pub fn forecaster(&self) -> PathBuf {
        self.file("forecaster.ckpt")
    }
    pub fn kb(&self) -> PathBuf {
        self.file("kb.idx")
    }
    pub fn kpm(&self) -> PathBuf {
        self.file("kpm.ckpt")
    }
    pub fn kpm_history(&self) -> PathBuf {
        self.file("kpm_history.csv")
    }
    pub fn fusion(&self) -> PathBuf {
        self.file("fusion.ckpt")
    }
    pub fn fusion_history(&self) -> PathBuf {
        self.file("fusion_history.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.json")
    }
    pub fn forecasts(&self) -> PathBuf {
        self.file("forecast.csv")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.file("diagnostics.json")
    }
    pub fn bench_json(&self) -> PathBuf {
        self.file("bench.json")
    }
    pub fn bench_csv(&self) -> PathBuf {
        self.file("bench.csv")
    }
    pub fn bench_raw(&self) -> PathBuf {
        self.file("bench_raw.csv")
    }
    pub fn ablation(&self, study: Study) -> PathBuf {
        self.file(&format!("ablate_{}.json", study_name(study)))
    }
    pub fn plot(&self, what: &str) -> PathBuf {
        self.file(&format!("plot_{what}.csv"))
    }
}

fn study_name(study: Study) -> &'static str {
    match study {
        Study::Topk => "topk",
        Study::Loss => "loss",
        Study::Gating => "gating",
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Also write tidy long-format CSVs for plotting.
    pub plot_data: bool,
}

/// What a stage wrote, plus a small machine-readable summary.
#[derive(Clone, Debug, Serialize)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// JSON report wrapper carrying full provenance.
#[derive(Clone, Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub tool_version: &'static str,
    pub kind: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub report: T,
}

pub fn write_report<T: Serialize>(path: &Path, kind: &str, cfg: &RunConfig, report: T) -> Result<()> {
    let r = Report { tool_version: TOOL_VERSION, kind, seed: cfg.seed, config: cfg, report };
    let mut text = serde_json::to_string_pretty(&r)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Comment header for text artifacts: tool version, stage, seed and the
/// full run configuration.
pub fn text_header(cfg: &RunConfig, kind: &str) -> Result<String> {
    Ok(format!("tool_version = \"{TOOL_VERSION}\"\nkind = \"{kind}\"\nseed = {}\n{}", cfg.seed, cfg.to_toml()?))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn guard(cfg: &RunConfig, outputs: &[PathBuf]) -> Result<()> {
    if !cfg.overwrite {
        if let Some(p) = outputs.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    Ok(())
}

pub fn run_stage(stage: Stage, cfg: &RunConfig, opts: &StageOptions) -> Result<StageOutput> {
    let dir = RunDir::new(&cfg.out);
    std::fs::create_dir_all(&dir.root)?;
    log::info!("stage {stage} in {}", dir.root.display());
    match stage {
        Stage::Synth => synth(cfg, &dir),
        Stage::BuildKb => build_kb(cfg, &dir),
        Stage::TrainKpm => train_kpm_stage(cfg, &dir),
        Stage::TrainFusion => train_fusion_disk(cfg, &dir),
        Stage::Forecast => forecast(cfg, &dir, opts),
        Stage::Bench => bench(cfg, &dir, opts),
        Stage::Ablate => ablate(cfg, &dir, opts),
    }
}

/// Input series: the configured CSV, else the `synth` output.
pub fn input_series(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<TimeSeries>> {
    let path = cfg.data.path.clone().unwrap_or_else(|| dir.data());
    require(&path)?;
    let (series, report) = load_csv(&path, cfg.data.layout)?;
    if report.imputed() > 0 {
        log::warn!("{} missing values forward-filled in {}", report.imputed(), path.display());
    }
    Ok(series)
}

fn dataset(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    prepare_dataset(&input_series(cfg, dir)?, cfg)
}

fn synth(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    let path = dir.data();
    guard(cfg, std::slice::from_ref(&path))?;
    let series = synthesize(cfg)?;
    write_long_csv(&series, &path, &text_header(cfg, "dataset")?)?;
    Ok(StageOutput {
        stage: Stage::Synth,
        artifacts: vec![path],
        summary: json!({ "kind": cfg.synth.kind.as_str(), "series": series.len(), "length": cfg.synth.length }),
    })
}

fn check_window(what: &str, key_len: usize, horizon: usize, cfg: &RunConfig) -> Result<()> {
    if key_len != cfg.data.key_len || horizon != cfg.data.horizon {
        return Err(Error::Incompatible(format!(
            "{what} has K={key_len}, V={horizon} but the configuration says K={}, V={}",
            cfg.data.key_len, cfg.data.horizon
        )));
    }
    Ok(())
}

fn load_forecaster(cfg: &RunConfig, dir: &RunDir) -> Result<Forecaster> {
    let (f, _) = Forecaster::load(&dir.forecaster())?;
    check_window("the base forecaster", f.key_len(), f.horizon(), cfg)?;
    Ok(f)
}

fn load_memory(cfg: &RunConfig, dir: &RunDir) -> Result<(KpmModel, KeyEncoder)> {
    let (model, encoder, _) = load_kpm(&dir.kpm())?;
    check_window("the memory checkpoint", encoder.key_len, model.config.horizon, cfg)?;
    let m = cfg.fusion_candidates();
    if m == 0 || m > model.config.branches {
        return Err(Error::Incompatible(format!(
            "fusion is configured for {m} candidates but the memory checkpoint has {} branches",
            model.config.branches
        )));
    }
    Ok((model, encoder))
}

fn build_kb(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    let outputs = [dir.forecaster(), dir.kb(), dir.stats()];
    guard(cfg, &outputs)?;
    let ds = dataset(cfg, dir)?;
    let table = cfg.to_table()?;
    let forecaster = fit_forecaster(cfg, &ds, cfg.seed)?;
    forecaster.save(&dir.forecaster(), cfg.seed, table)?;
    let (encoder, _) = init_memory(cfg, cfg.seed)?;
    let mut index = MemoryIndex::build(&ds.train, &encoder, cfg.index.n_cells, &mut RngState::for_stage(cfg.seed, "kb-index"))?;
    index.header = text_header(cfg, "knowledge-base")?;
    index.save(&dir.kb())?;
    save_stats(&dir.stats(), &ds.stats)?;
    Ok(StageOutput {
        stage: Stage::BuildKb,
        artifacts: outputs.to_vec(),
        summary: json!({
            "entries": index.len(),
            "cells": index.n_cells(),
            "train": ds.train.len(),
            "val": ds.val.len(),
            "test": ds.test.len(),
            "forecaster": forecaster.name(),
        }),
    })
}

fn train_kpm_stage(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.kb())?;
    let outputs = [dir.kpm(), dir.kpm_history()];
    guard(cfg, &outputs)?;
    let ds = dataset(cfg, dir)?;
    let kb = MemoryIndex::load(&dir.kb())?;
    check_window("the knowledge base", kb.key_len(), kb.horizon(), cfg)?;
    if kb.len() != ds.train.len() || kb.latent_dim() != cfg.index.latent_dim {
        return Err(Error::Incompatible(format!(
            "knowledge base holds {} entries of width {}, but the data and configuration give {} of width {}; rerun build-kb",
            kb.len(),
            kb.latent_dim(),
            ds.train.len(),
            cfg.index.latent_dim
        )));
    }
    let kpm = train_memory(cfg, &ds.train, &ds.val, cfg.kpm.loss, false, cfg.seed)?;
    save_kpm(&dir.kpm(), &kpm.model, &kpm.encoder, cfg.seed, cfg.to_table()?)?;
    kpm.history.write_csv(&dir.kpm_history(), &text_header(cfg, "kpm-history")?)?;
    Ok(StageOutput {
        stage: Stage::TrainKpm,
        artifacts: outputs.to_vec(),
        summary: json!({
            "epochs": kpm.history.records.len().saturating_sub(1),
            "best_epoch": kpm.history.best_epoch,
            "best_val": kpm.history.best_val(),
            "leak_violations": kpm.leak_violations,
        }),
    })
}

fn train_fusion_disk(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.forecaster())?;
    require(&dir.kpm())?;
    let outputs = [dir.fusion(), dir.fusion_history()];
    guard(cfg, &outputs)?;
    let forecaster = load_forecaster(cfg, dir)?;
    let (model, encoder) = load_memory(cfg, dir)?;
    let ds = dataset(cfg, dir)?;
    let before = forecaster.checksum();
    let k = cfg.fusion_candidates();
    let train = fusion_data(&forecaster, &model, &encoder, &ds.train, k)?;
    let val = fusion_data(&forecaster, &model, &encoder, &ds.val, k)?;
    let trained = train_fusion_stage(cfg, cfg.fusion_config()?, &train, &val, cfg.seed)?;
    if forecaster.checksum() != before {
        return Err(Error::State("base forecaster parameters changed during fusion training".into()));
    }
    save_fusion(&dir.fusion(), &trained.model, cfg.seed, cfg.to_table()?)?;
    trained.history.write_csv(&dir.fusion_history(), &text_header(cfg, "fusion-history")?)?;
    Ok(StageOutput {
        stage: Stage::TrainFusion,
        artifacts: outputs.to_vec(),
        summary: json!({
            "epochs": trained.history.records.len().saturating_sub(1),
            "best_epoch": trained.history.best_epoch,
            "best_val": trained.history.best_val(),
            "gate": trained.model.gate(),
        }),
    })
}

/// Test-split metrics written by `forecast`.
#[derive(Clone, Debug, Serialize)]
pub struct ForecastMetrics {
    pub evaluation: Evaluation,
    pub candidates: usize,
    pub test_samples: usize,
    pub base_checksum: u64,
}

fn load_fusion_for(cfg: &RunConfig, dir: &RunDir, memory: &KpmModel) -> Result<FusionModel> {
    let (fusion, _) = load_fusion(&dir.fusion())?;
    let c = &fusion.config;
    if c.horizon != memory.config.horizon || c.candidates > memory.config.branches {
        return Err(Error::Incompatible(format!(
            "fusion checkpoint expects {} candidates of length {}, memory checkpoint gives {} of length {}",
            c.candidates, c.horizon, memory.config.branches, memory.config.horizon
        )));
    }
    check_window("the fusion checkpoint", cfg.data.key_len, c.horizon, cfg)?;
    Ok(fusion)
}

fn forecast(cfg: &RunConfig, dir: &RunDir, opts: &StageOptions) -> Result<StageOutput> {
    for p in [dir.forecaster(), dir.kpm(), dir.fusion()] {
        require(&p)?;
    }
    let mut outputs = vec![dir.metrics(), dir.forecasts(), dir.diagnostics()];
    if opts.plot_data {
        outputs.push(dir.plot("forecast"));
    }
    guard(cfg, &outputs)?;
    let forecaster = load_forecaster(cfg, dir)?;
    let (memory, encoder) = load_memory(cfg, dir)?;
    let fusion = load_fusion_for(cfg, dir, &memory)?;
    let ds = dataset(cfg, dir)?;
    if ds.test.is_empty() {
        return Err(Error::Data("no test windows to forecast".into()));
    }
    let m = fusion.config.candidates;
    let test = fusion_data(&forecaster, &memory, &encoder, &ds.test, m)?;
    let evaluation = evaluate(&fusion, &test)?;
    let fused = predict_fusion(&fusion, &test)?;

    let metrics = ForecastMetrics { evaluation: evaluation.clone(), candidates: m, test_samples: ds.test.len(), base_checksum: forecaster.checksum() };
    write_report(&dir.metrics(), "metrics", cfg, &metrics)?;
    write_forecasts(&dir.forecasts(), &text_header(cfg, "forecast")?, &ds.test, &test.base, &fused, &test.target)?;

    let mut bundles = Vec::new();
    for i in 0..ds.test.len().min(DIAGNOSTIC_SAMPLES) {
        let cands: Vec<Vec<f64>> = (0..m).map(|j| test.candidates.row(i * m + j).to_vec()).collect();
        bundles.push(json!({
            "series_id": ds.test[i].series_id,
            "channel": ds.test[i].channel,
            "t": ds.test[i].t,
            "bundle": fusion.fuse(test.base.row(i), &cands, None)?,
        }));
    }
    write_report(&dir.diagnostics(), "diagnostics", cfg, &bundles)?;
    if opts.plot_data {
        write_forecast_plot(&dir.plot("forecast"), &ds.test, &test.base, &fused, &test.target, &test.candidates, m)?;
    }
    Ok(StageOutput {
        stage: Stage::Forecast,
        artifacts: outputs,
        summary: json!({
            "base_mse": evaluation.base.mse,
            "fused_mse": evaluation.fused.mse,
            "relative_mse": evaluation.relative_mse,
        }),
    })
}

fn write_forecasts(
    path: &Path,
    header: &str,
    pairs: &[WindowPair],
    base: &crate::numerics::Tensor,
    fused: &crate::numerics::Tensor,
    target: &crate::numerics::Tensor,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for line in header.lines() {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["series_id", "channel", "t", "step", "target", "base", "fused"])?;
    for (i, p) in pairs.iter().enumerate() {
        for s in 0..target.cols() {
            w.write_record([
                p.series_id.clone(),
                p.channel.to_string(),
                p.t.to_string(),
                s.to_string(),
                target.row(i)[s].to_string(),
                base.row(i)[s].to_string(),
                fused.row(i)[s].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_forecast_plot(
    path: &Path,
    pairs: &[WindowPair],
    base: &crate::numerics::Tensor,
    fused: &crate::numerics::Tensor,
    target: &crate::numerics::Tensor,
    candidates: &crate::numerics::Tensor,
    m: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "t", "step", "curve", "value"])?;
    for (i, p) in pairs.iter().enumerate() {
        let mut curves: Vec<(String, &[f64])> =
            vec![("target".into(), target.row(i)), ("base".into(), base.row(i)), ("fused".into(), fused.row(i))];
        for j in 0..m {
            curves.push((format!("candidate_{j}"), candidates.row(i * m + j)));
        }
        for (name, values) in curves {
            for (s, v) in values.iter().enumerate() {
                w.write_record([p.series_id.as_str(), &p.t.to_string(), &s.to_string(), &name, &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Windows of fresh stand-in series at the benchmark shape, encoded.
fn bench_pool(cfg: &RunConfig, encoder: &KeyEncoder, count: usize, stage: &str) -> Result<(Vec<EntrySource>, Vec<Vec<f64>>)> {
    let b = &cfg.bench;
    let span = b.key_len + b.horizon;
    let per_series = BENCH_SERIES_LEN - span + 1;
    let mut spec = cfg.synth_spec();
    spec.kind = SynthKind::SinusMix;
    spec.key_len = b.key_len;
    spec.horizon = b.horizon;
    spec.length = BENCH_SERIES_LEN;
    spec.n_series = count.div_ceil(per_series).max(1);
    let series = crate::data::generate(&spec, RngState::for_stage(cfg.seed, stage).next_u64())?;
    let window = crate::data::WindowSpec::new(b.key_len, b.horizon, 1)?;
    let mut raw: Vec<(String, usize, Vec<f64>, Vec<f64>)> = Vec::with_capacity(count);
    'outer: for s in &series {
        let (norm, _) = normalize(s, &SplitSpec::default())?;
        let x = norm.channel_values(0);
        for t in window_starts(x.len(), &window) {
            if raw.len() == count {
                break 'outer;
            }
            raw.push((norm.id.clone(), t, x[t..t + b.key_len].to_vec(), x[t + b.key_len..t + span].to_vec()));
        }
    }
    let mut sources = Vec::with_capacity(raw.len());
    let mut keys = Vec::with_capacity(raw.len());
    for chunk in raw.chunks(ENCODE_CHUNK) {
        let z = encoder.encode_batch(&chunk.iter().map(|r| r.2.as_slice()).collect::<Vec<_>>())?;
        for (i, (id, t, key, value)) in chunk.iter().enumerate() {
            sources.push(EntrySource { series_id: id.clone(), channel: 0, t: *t, latent: z.row(i).to_vec(), value: value.clone() });
            keys.push(key.clone());
        }
    }
    Ok((sources, keys))
}

/// Runs the latency benchmark described by `cfg.bench`.
pub fn run_bench(cfg: &RunConfig) -> Result<(LatencyReport, Vec<crate::eval::RawTiming>)> {
    let b = &cfg.bench;
    let opts = BenchOptions { batch: b.batch, warmup: b.warmup, reps: b.reps, k: b.k, brute_force: b.brute_force, threads: b.threads };
    opts.validate()?;
    if b.kb_sizes.is_empty() || b.kb_sizes.contains(&0) {
        return Err(Error::Config("bench.kb_sizes must list positive sizes".into()));
    }
    let mut rng = RngState::for_stage(cfg.seed, "bench");
    let mut encoder = KeyEncoder::new(b.key_len, cfg.index.latent_dim, &mut rng)?;
    encoder.standardize = cfg.index.standardize_keys;
    let kpm = KpmModel::new(cfg.bench_kpm_config(), &mut rng)?;
    let largest = b.kb_sizes.iter().copied().max().unwrap_or(0);
    let (pool, _) = bench_pool(cfg, &encoder, largest, "bench-kb")?;
    let family = index_family(pool, &b.kb_sizes, cfg.index.latent_dim, b.horizon, b.key_len, &mut rng)?;
    let (_, queries) = bench_pool(cfg, &encoder, b.batch, "bench-queries")?;
    bench_latency(&encoder, &kpm, &family, &queries, &opts)
}

fn bench(cfg: &RunConfig, dir: &RunDir, opts: &StageOptions) -> Result<StageOutput> {
    let mut outputs = vec![dir.bench_json(), dir.bench_csv(), dir.bench_raw()];
    if opts.plot_data {
        outputs.push(dir.plot("bench"));
    }
    guard(cfg, &outputs)?;
    let (report, raw) = run_bench(cfg)?;
    write_report(&dir.bench_json(), "bench", cfg, &report)?;
    report.write_csv(&dir.bench_csv())?;
    write_raw_csv(&raw, &text_header(cfg, "bench-raw")?, &dir.bench_raw())?;
    if opts.plot_data {
        let mut w = csv::Writer::from_path(dir.plot("bench"))?;
        w.write_record(["kb_size", "path", "statistic", "value"])?;
        for s in &report.sizes {
            let rows = [
                ("kpm", "mean_ms", s.kpm_mean_ms),
                ("kpm", "std_ms", s.kpm_std_ms),
                ("kpm", "throughput", s.kpm_throughput),
                ("rag", "mean_ms", s.rag_mean_ms),
                ("rag", "std_ms", s.rag_std_ms),
                ("rag", "throughput", s.rag_throughput),
                ("rag", "speedup", s.speedup),
            ];
            for (path, stat, v) in rows {
                w.write_record([s.kb_size.to_string(), path.into(), stat.into(), v.to_string()])?;
            }
            if let Some(v) = s.brute_mean_ms {
                w.write_record([s.kb_size.to_string(), "brute_force".into(), "mean_ms".into(), v.to_string()])?;
            }
        }
        w.flush()?;
    }
    let summary = report
        .sizes
        .iter()
        .map(|s| json!({ "kb_size": s.kb_size, "kpm_mean_ms": s.kpm_mean_ms, "rag_mean_ms": s.rag_mean_ms, "speedup": s.speedup }))
        .collect::<Vec<_>>();
    Ok(StageOutput { stage: Stage::Bench, artifacts: outputs, summary: json!(summary) })
}

fn ablate(cfg: &RunConfig, dir: &RunDir, opts: &StageOptions) -> Result<StageOutput> {
    require(&dir.forecaster())?;
    let studies = &cfg.ablate.studies;
    if studies.contains(&Study::Topk) {
        require(&dir.kpm())?;
    }
    let mut outputs: Vec<PathBuf> = studies.iter().map(|&s| dir.ablation(s)).collect();
    if opts.plot_data && studies.contains(&Study::Topk) {
        outputs.push(dir.plot("topk"));
    }
    guard(cfg, &outputs)?;
    let forecaster = load_forecaster(cfg, dir)?;
    let ds = dataset(cfg, dir)?;
    let mut summary = serde_json::Map::new();
    for &study in studies {
        let path = dir.ablation(study);
        match study {
            Study::Topk => {
                let (model, encoder, _) = load_kpm(&dir.kpm())?;
                check_window("the memory checkpoint", encoder.key_len, model.config.horizon, cfg)?;
                let m = model.config.branches;
                let ks: Vec<usize> = if cfg.ablate.ks.is_empty() { (1..=m).collect() } else { cfg.ablate.ks.clone() };
                let rows = topk_sweep(cfg, &ds, &forecaster, &model, &encoder, &ks)?;
                write_report(&path, "ablate-topk", cfg, &rows)?;
                if opts.plot_data {
                    let mut w = csv::Writer::from_path(dir.plot("topk"))?;
                    w.write_record(["k", "metric", "value"])?;
                    for r in &rows {
                        for (name, v) in [("mse", r.mse), ("mae", r.mae), ("relative_mse", r.relative_mse), ("base_mse", r.base_mse)] {
                            w.write_record([r.k.to_string(), name.into(), v.to_string()])?;
                        }
                    }
                    w.flush()?;
                }
                summary.insert("topk".into(), json!(rows.iter().map(|r| (r.k, r.relative_mse)).collect::<Vec<_>>()));
            }
            Study::Loss => {
                let r = loss_ablation(cfg, &ds, &forecaster)?;
                summary.insert(
                    "loss".into(),
                    json!({ "perm_mse": r.perm.fused.mse, "mse_mse": r.mse.fused.mse, "perm_diversity": r.perm.diversity, "mse_diversity": r.mse.diversity }),
                );
                write_report(&path, "ablate-loss", cfg, &r)?;
            }
            Study::Gating => {
                let r = gating_ablation(cfg, &ds, &forecaster, cfg.ablate.noise_fraction)?;
                summary.insert("gating".into(), json!({ "gated_mse": r.gated.mse, "ungated_mse": r.ungated.mse, "base_mse": r.base.mse }));
                write_report(&path, "ablate-gating", cfg, &r)?;
            }
        }
    }
    Ok(StageOutput { stage: Stage::Ablate, artifacts: outputs, summary: serde_json::Value::Object(summary) })
}
