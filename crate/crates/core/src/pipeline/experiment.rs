//! In-memory pipeline stages: data preparation, base forecaster, memory
//! module, fusion head and evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::windows::window_starts;
use crate::data::{decompose_channels, normalize, segment_series, NormStats, Split, SplitSpec, SynthKind, TimeSeries, WindowPair};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricReport};
use crate::forecasters::{BaseForecaster, Forecaster, LinearPatchForecaster, SeasonalNaive};
use crate::fusion::{predict_fusion, train_fusion, FusionConfig, FusionData, FusionModel, TrainedFusion};
use crate::index::KeyEncoder;
use crate::kpm::{train_kpm, KpmModel, LossKind, TrainedKpm};
use crate::numerics::{RngState, Tensor};
use crate::pipeline::config::{ForecasterKind, RunConfig};

const CHUNK: usize = 256;

/// Normalized series and their leakage-free window pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: Vec<TimeSeries>,
    pub stats: Vec<NormStats>,
    pub train: Vec<WindowPair>,
    pub val: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
}

pub fn prepare_dataset(raw: &[TimeSeries], cfg: &RunConfig) -> Result<Dataset> {
    let (window, split) = (cfg.data.window(), cfg.data.split());
    let mut ds = Dataset { series: Vec::new(), stats: Vec::new(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for s in raw.iter().flat_map(decompose_channels) {
        let (norm, stats) = normalize(&s, &split)?;
        for p in segment_series(&norm, &window, &split)? {
            match p.split {
                Split::Train => ds.train.push(p),
                Split::Val => ds.val.push(p),
                Split::Test => ds.test.push(p),
            }
        }
        ds.series.push(norm);
        ds.stats.push(stats);
    }
    if ds.train.is_empty() {
        return Err(Error::Data(format!(
            "no training windows: series too short for K+V = {} under the chronological split",
            window.span()
        )));
    }
    Ok(ds)
}

pub fn keys(pairs: &[WindowPair]) -> Vec<&[f64]> {
    pairs.iter().map(|p| p.key.data()).collect()
}

pub fn values(pairs: &[WindowPair]) -> Result<Tensor> {
    let v = pairs.first().map(|p| p.value.len()).unwrap_or(0);
    Tensor::new(&[pairs.len(), v], pairs.iter().flat_map(|p| p.value.data().iter().copied()).collect())
}

/// Windows of the stand-in pretraining corpus, disjoint from the target data.
pub fn pretraining_corpus(cfg: &RunConfig, seed: u64) -> Result<Vec<WindowPair>> {
    let f = &cfg.forecaster;
    let mut spec = cfg.synth_spec();
    spec.kind = SynthKind::SinusMix;
    spec.n_series = f.corpus_series;
    spec.length = f.corpus_length;
    spec.noise = f.corpus_noise;
    let series = crate::data::generate(&spec, RngState::for_stage(seed, "pretrain-corpus").next_u64())?;
    let window = cfg.data.window();
    let mut pairs = Vec::new();
    for s in &series {
        let (norm, _) = normalize(s, &SplitSpec::default())?;
        let x = norm.channel_values(0);
        for t in window_starts(x.len(), &window) {
            pairs.push(WindowPair {
                series_id: norm.id.clone(),
                channel: 0,
                t,
                key: Tensor::new(&[window.key_len, 1], x[t..t + window.key_len].to_vec())?,
                value: Tensor::new(&[window.horizon, 1], x[t + window.key_len..t + window.span()].to_vec())?,
                split: Split::Train,
            });
        }
    }
    Ok(pairs)
}

/// The frozen base forecaster: seasonal naive, or ridge fit on the
/// pretraining corpus (or the target training split when so configured).
pub fn fit_forecaster(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<Forecaster> {
    let (k, v) = (cfg.data.key_len, cfg.data.horizon);
    let f = &cfg.forecaster;
    match f.kind {
        ForecasterKind::SeasonalNaive => Ok(Forecaster::SeasonalNaive(SeasonalNaive::new(f.period.unwrap_or(k), k, v)?)),
        ForecasterKind::LinearPatch => {
            let fit = if f.fit_on_target {
                LinearPatchForecaster::fit_ridge(&data.train, f.lambda)?
            } else {
                LinearPatchForecaster::fit_ridge(&pretraining_corpus(cfg, seed)?, f.lambda)?
            };
            Ok(Forecaster::LinearPatch(fit))
        }
    }
}

pub fn init_memory(cfg: &RunConfig, seed: u64) -> Result<(KeyEncoder, KpmModel)> {
    let mut rng = RngState::for_stage(seed, "kpm-init");
    let mut encoder = KeyEncoder::new(cfg.data.key_len, cfg.index.latent_dim, &mut rng)?;
    encoder.standardize = cfg.index.standardize_keys;
    let model = KpmModel::new(cfg.kpm_config(), &mut rng)?;
    Ok((encoder, model))
}

/// Trains the memory module against the knowledge base built from `memory`.
pub fn train_memory(cfg: &RunConfig, memory: &[WindowPair], val: &[WindowPair], loss: LossKind, audit: bool, seed: u64) -> Result<TrainedKpm> {
    let (encoder, model) = init_memory(cfg, seed)?;
    let mut tc = cfg.kpm_train();
    tc.loss = loss;
    train_kpm(memory, val, encoder, model, &tc, audit, &mut RngState::for_stage(seed, "kpm-train"))
}

/// Branch forecasts `[N·M, V]` for every pair.
pub fn branch_outputs(model: &KpmModel, encoder: &KeyEncoder, pairs: &[WindowPair]) -> Result<Tensor> {
    let (m, v) = (model.config.branches, model.config.horizon);
    let parts: Vec<Result<Vec<f64>>> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let z = encoder.encode_batch(&keys(chunk))?;
            Ok(model.predict_batch(&z)?.into_data())
        })
        .collect();
    let mut data = Vec::with_capacity(pairs.len() * m * v);
    for p in parts {
        data.extend(p?);
    }
    Tensor::new(&[pairs.len() * m, v], data)
}

pub fn base_outputs(forecaster: &Forecaster, pairs: &[WindowPair]) -> Result<Tensor> {
    let rows: Vec<Result<Vec<f64>>> = pairs.par_iter().map(|p| forecaster.predict(p.key.data())).collect();
    let mut data = Vec::with_capacity(pairs.len() * forecaster.horizon());
    for r in rows {
        data.extend(r?);
    }
    Tensor::new(&[pairs.len(), forecaster.horizon()], data)
}

/// Base forecasts, the first `k` memory candidates and targets for `pairs`.
pub fn fusion_data(forecaster: &Forecaster, model: &KpmModel, encoder: &KeyEncoder, pairs: &[WindowPair], k: usize) -> Result<FusionData> {
    if forecaster.horizon() != model.config.horizon {
        return Err(Error::Incompatible(format!(
            "base forecaster has V={}, memory module V={}",
            forecaster.horizon(),
            model.config.horizon
        )));
    }
    let all = FusionData::new(base_outputs(forecaster, pairs)?, branch_outputs(model, encoder, pairs)?, values(pairs)?, model.config.branches)?;
    if k == model.config.branches {
        Ok(all)
    } else {
        all.truncate_candidates(k)
    }
}

pub fn init_fusion(config: FusionConfig, seed: u64) -> Result<FusionModel> {
    FusionModel::new(config, &mut RngState::for_stage(seed, "fusion-init"))
}

pub fn train_fusion_stage(cfg: &RunConfig, config: FusionConfig, train: &FusionData, val: &FusionData, seed: u64) -> Result<TrainedFusion> {
    let model = init_fusion(config, seed)?;
    train_fusion(train, val, model, &cfg.fusion_train(), &mut RngState::for_stage(seed, "fusion-train"))
}

/// Test-split errors of the base forecaster and of the fused forecast.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub base: MetricReport,
    pub fused: MetricReport,
    /// `fused.mse / base.mse`
    pub relative_mse: f64,
}

pub fn evaluate(model: &FusionModel, test: &FusionData) -> Result<Evaluation> {
    let base = compute_metrics(&test.base, &test.target)?;
    let fused = compute_metrics(&predict_fusion(model, test)?, &test.target)?;
    let relative_mse = fused.mse / base.mse;
    Ok(Evaluation { base, fused, relative_mse })
}

/// Everything produced by one end-to-end run.
pub struct RunOutcome {
    pub dataset: Dataset,
    pub forecaster: Forecaster,
    pub kpm: TrainedKpm,
    pub fusion: TrainedFusion,
    pub evaluation: Evaluation,
    /// Base-forecaster checksum before and after the adaptation stages.
    pub base_checksum: (u64, u64),
}

/// Runs every stage in memory on `raw` series.
pub fn run_pipeline(cfg: &RunConfig, raw: &[TimeSeries]) -> Result<RunOutcome> {
    let seed = cfg.seed;
    let dataset = prepare_dataset(raw, cfg)?;
    let forecaster = fit_forecaster(cfg, &dataset, seed)?;
    let before = forecaster.checksum();
    let kpm = train_memory(cfg, &dataset.train, &dataset.val, cfg.kpm.loss, false, seed)?;
    let k = cfg.fusion_candidates();
    let train = fusion_data(&forecaster, &kpm.model, &kpm.encoder, &dataset.train, k)?;
    let val = fusion_data(&forecaster, &kpm.model, &kpm.encoder, &dataset.val, k)?;
    let test = fusion_data(&forecaster, &kpm.model, &kpm.encoder, &dataset.test, k)?;
    let fusion = train_fusion_stage(cfg, cfg.fusion_config()?, &train, &val, seed)?;
    let evaluation = evaluate(&fusion.model, &test)?;
    let after = forecaster.checksum();
    if before != after {
        return Err(Error::State("base forecaster parameters changed during adaptation".into()));
    }
    Ok(RunOutcome { dataset, forecaster, kpm, fusion, evaluation, base_checksum: (before, after) })
}

/// Synthetic input series for `cfg`, as the `synth` stage would write them.
pub fn synthesize(cfg: &RunConfig) -> Result<Vec<TimeSeries>> {
    crate::data::generate(&cfg.synth_spec(), RngState::for_stage(cfg.seed, "synth").next_u64())
}
