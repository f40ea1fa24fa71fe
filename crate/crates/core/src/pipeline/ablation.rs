//! Top-k sweep, loss ablation and gating ablation drivers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{branch_diversity, MetricReport};
use crate::forecasters::Forecaster;
use crate::index::KeyEncoder;
use crate::kpm::{KpmModel, LossKind, TrainedKpm};
use crate::numerics::{RngState, Tensor};
use crate::pipeline::experiment::{branch_outputs, evaluate, fusion_data, train_fusion_stage, train_memory, Dataset};
use crate::pipeline::config::RunConfig;
use crate::data::WindowPair;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopkRow {
    pub k: usize,
    pub mse: f64,
    pub mae: f64,
    /// MSE relative to the `k = 1` row.
    pub relative_mse: f64,
    pub base_mse: f64,
}

/// Retrains the fusion head on the first `k` candidates for every `k`,
/// each time from the same stage seed.
pub fn topk_sweep(
    cfg: &RunConfig,
    data: &Dataset,
    forecaster: &Forecaster,
    model: &KpmModel,
    encoder: &KeyEncoder,
    ks: &[usize],
) -> Result<Vec<TopkRow>> {
    let m = model.config.branches;
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::Config(format!("k = {bad} is outside 1..={m}")));
    }
    let mut rows: Vec<TopkRow> = Vec::with_capacity(ks.len());
    for &k in ks {
        let train = fusion_data(forecaster, model, encoder, &data.train, k)?;
        let val = fusion_data(forecaster, model, encoder, &data.val, k)?;
        let test = fusion_data(forecaster, model, encoder, &data.test, k)?;
        let mut fc = cfg.fusion_config_unchecked();
        fc.candidates = k;
        let trained = train_fusion_stage(cfg, fc, &train, &val, cfg.seed)?;
        let ev = evaluate(&trained.model, &test)?;
        rows.push(TopkRow { k, mse: ev.fused.mse, mae: ev.fused.mae, relative_mse: f64::NAN, base_mse: ev.base.mse });
    }
    let reference = rows.iter().find(|r| r.k == 1).or(rows.first()).map(|r| r.mse).unwrap_or(f64::NAN);
    for r in &mut rows {
        r.relative_mse = r.mse / reference;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossArm {
    pub loss: LossKind,
    /// Mean pairwise L2 distance between branch outputs on the test split.
    pub diversity: f64,
    pub fused: MetricReport,
    pub base: MetricReport,
    pub best_val: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossAblation {
    pub perm: LossArm,
    pub mse: LossArm,
}

/// One full memory + fusion run for a given training loss.
pub fn loss_arm(cfg: &RunConfig, data: &Dataset, forecaster: &Forecaster, loss: LossKind) -> Result<(LossArm, TrainedKpm)> {
    let kpm = train_memory(cfg, &data.train, &data.val, loss, false, cfg.seed)?;
    let k = cfg.fusion_candidates();
    let train = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.train, k)?;
    let val = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.val, k)?;
    let test = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.test, k)?;
    let fusion = train_fusion_stage(cfg, cfg.fusion_config()?, &train, &val, cfg.seed)?;
    let ev = evaluate(&fusion.model, &test)?;
    let branches = branch_outputs(&kpm.model, &kpm.encoder, &data.test)?;
    let arm = LossArm {
        loss,
        diversity: branch_diversity(&branches, kpm.model.config.branches)?,
        fused: ev.fused,
        base: ev.base,
        best_val: kpm.history.best_val().unwrap_or(f64::NAN),
        epochs: kpm.history.records.len().saturating_sub(1),
    };
    Ok((arm, kpm))
}

pub fn loss_ablation(cfg: &RunConfig, data: &Dataset, forecaster: &Forecaster) -> Result<LossAblation> {
    let (perm, _) = loss_arm(cfg, data, forecaster, LossKind::Perm)?;
    let (mse, _) = loss_arm(cfg, data, forecaster, LossKind::Mse)?;
    Ok(LossAblation { perm, mse })
}

/// Copies of `pairs` with a `fraction` of the futures replaced by
/// unit-variance noise.
pub fn corrupt_memory(pairs: &[WindowPair], fraction: f64, seed: u64) -> Result<Vec<WindowPair>> {
    let mut rng = RngState::for_stage(seed, "ablate-noise");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let n_noisy = (fraction * pairs.len() as f64).round() as usize;
    let mut out = pairs.to_vec();
    for &i in &order[..n_noisy.min(pairs.len())] {
        let shape = out[i].value.shape().to_vec();
        let noise = (0..out[i].value.len()).map(|_| rng.normal()).collect();
        out[i].value = Tensor::new(&shape, noise)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GatingAblation {
    pub noise_fraction: f64,
    pub gated: MetricReport,
    pub ungated: MetricReport,
    pub base: MetricReport,
}

/// Gated and ungated fusion over a memory module trained on a noisy
/// knowledge base, with identical data and seeds.
pub fn gating_ablation(cfg: &RunConfig, data: &Dataset, forecaster: &Forecaster, noise_fraction: f64) -> Result<GatingAblation> {
    let memory = corrupt_memory(&data.train, noise_fraction, cfg.seed)?;
    let kpm = train_memory(cfg, &memory, &data.val, cfg.kpm.loss, false, cfg.seed)?;
    let k = cfg.fusion_candidates();
    let train = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.train, k)?;
    let val = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.val, k)?;
    let test = fusion_data(forecaster, &kpm.model, &kpm.encoder, &data.test, k)?;
    let mut fc = cfg.fusion_config()?;
    fc.gated = true;
    let gated = train_fusion_stage(cfg, fc, &train, &val, cfg.seed)?;
    fc.gated = false;
    let ungated = train_fusion_stage(cfg, fc, &train, &val, cfg.seed)?;
    let g = evaluate(&gated.model, &test)?;
    let u = evaluate(&ungated.model, &test)?;
    Ok(GatingAblation { noise_fraction, gated: g.fused, ungated: u.fused, base: g.base })
}
