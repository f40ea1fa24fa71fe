use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowPair;
use crate::error::{Error, Result};
use crate::index::{default_n_probe, KeyEncoder, LeakageMask, MemoryIndex};
use crate::kpm::matching::{identity_loss, permutation_loss};
use crate::kpm::model::KpmModel;
use crate::numerics::tensor::squared_distance;
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Set-matching loss over branch→target bijections.
    Perm,
    /// Branch `m` regressed onto target `m`.
    Mse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Perm => "perm",
            LossKind::Mse => "mse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpmTrainConfig {
    pub loss: LossKind,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Rebuild the index from the current key encoder every this many epochs.
    pub refresh_every: usize,
    pub n_cells: Option<usize>,
    pub n_probe: Option<usize>,
    /// Candidates retrieved per branch before duplicate futures are dropped.
    pub pool_factor: usize,
    /// Futures closer than this relative squared distance count as duplicates.
    pub dedup_tolerance: f64,
    pub max_skip_fraction: f64,
    pub grad_clip: f64,
    pub adam: AdamConfig,
}

impl Default for KpmTrainConfig {
    fn default() -> Self {
        KpmTrainConfig {
            loss: LossKind::Perm,
            max_epochs: 200,
            patience: 10,
            batch_size: 32,
            refresh_every: 5,
            n_cells: None,
            n_probe: None,
            pool_factor: 8,
            dedup_tolerance: 1e-2,
            max_skip_fraction: 0.5,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl KpmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.refresh_every == 0 || self.pool_factor == 0 {
            return Err(Error::Config("batch_size, refresh_every and pool_factor must be ≥ 1".into()));
        }
        if !(self.dedup_tolerance >= 0.0) {
            return Err(Error::Config(format!("dedup_tolerance must be ≥ 0, got {}", self.dedup_tolerance)));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::Config(format!("max_skip_fraction must lie in [0,1], got {}", self.max_skip_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub skipped_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn initial_val(&self) -> Option<f64> {
        self.records.first().map(|r| r.val_loss)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }

    /// CSV with `# ` comment lines for `header` (one per line) on top.
    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for line in header.lines() {
            writeln!(f, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["epoch", "train_loss", "val_loss", "skipped_samples"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.skipped_samples.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Retrieval request issued during training, resolved to entry identities.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub query: LeakageMask,
    pub hits: Vec<(String, usize, usize)>,
}

pub struct TrainedKpm {
    pub model: KpmModel,
    pub encoder: KeyEncoder,
    /// Index rebuilt from the final encoder.
    pub index: MemoryIndex,
    pub history: TrainHistory,
    pub leak_violations: u64,
    /// Every training retrieval, when auditing was requested.
    pub audit: Vec<AuditEntry>,
}

fn near_duplicate(a: &[f64], b: &[f64], tolerance: f64) -> bool {
    let scale: f64 = a.iter().chain(b).map(|v| v * v).sum();
    squared_distance(a, b) <= tolerance * scale + 1e-18
}

/// `m` target futures for one query: the nearest leakage-free entries with
/// duplicate futures dropped, padded with the nearest when too few remain.
pub fn select_targets(
    index: &MemoryIndex,
    z: &[f64],
    mask: &LeakageMask,
    m: usize,
    pool: usize,
    n_probe: usize,
    tolerance: f64,
) -> Result<Vec<Vec<f64>>> {
    let hits = index.query_topk(z, pool.max(m), Some(mask), n_probe)?;
    let mut chosen: Vec<&[f64]> = Vec::with_capacity(m);
    for h in &hits {
        let v = index.value(h.entry);
        if chosen.iter().all(|c| !near_duplicate(c, v, tolerance)) {
            chosen.push(v);
            if chosen.len() == m {
                break;
            }
        }
    }
    let nearest = chosen[0];
    while chosen.len() < m {
        chosen.push(nearest);
    }
    Ok(chosen.into_iter().map(|v| v.to_vec()).collect())
}

fn mask_for(p: &WindowPair) -> LeakageMask {
    LeakageMask::new(p.series_id.clone(), p.channel, p.t, p.key.len() + p.value.len())
}

struct TargetSet {
    targets: Vec<Option<Vec<Vec<f64>>>>,
    skipped: usize,
}

struct Retriever<'a> {
    cfg: &'a KpmTrainConfig,
    branches: usize,
    rng: RngState,
    audit: bool,
    leak_violations: u64,
    audit_log: Vec<AuditEntry>,
}

impl Retriever<'_> {
    fn build(&mut self, train: &[WindowPair], encoder: &KeyEncoder) -> Result<MemoryIndex> {
        let index = MemoryIndex::build(train, encoder, self.cfg.n_cells, &mut self.rng)?;
        if self.audit {
            index.enable_log();
        }
        Ok(index)
    }

    fn targets(&mut self, index: &MemoryIndex, encoder: &KeyEncoder, pairs: &[WindowPair]) -> Result<TargetSet> {
        let n_probe = self.cfg.n_probe.unwrap_or_else(|| default_n_probe(index.n_cells())).min(index.n_cells());
        let keys: Vec<&[f64]> = pairs.iter().map(|p| p.key.data()).collect();
        let mut targets = Vec::with_capacity(pairs.len());
        let mut skipped = 0;
        for (chunk_i, chunk) in keys.chunks(1024).enumerate() {
            let z = encoder.encode_batch(chunk)?;
            for i in 0..chunk.len() {
                let p = &pairs[chunk_i * 1024 + i];
                let pool = self.cfg.pool_factor * self.branches;
                match select_targets(index, z.row(i), &mask_for(p), self.branches, pool, n_probe, self.cfg.dedup_tolerance) {
                    Ok(t) => targets.push(Some(t)),
                    Err(Error::Retrieval(_)) => {
                        skipped += 1;
                        targets.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(TargetSet { targets, skipped })
    }

    fn retire(&mut self, index: &MemoryIndex) {
        self.leak_violations += index.leak_violations();
        if self.audit {
            for rec in index.take_log() {
                let Some(query) = rec.mask else { continue };
                let hits = rec
                    .hits
                    .iter()
                    .map(|&e| {
                        let (s, c, t) = index.identity(e);
                        (s.to_string(), c, t)
                    })
                    .collect();
                self.audit_log.push(AuditEntry { query, hits });
            }
        }
    }
}

/// Mean matched loss per sample over `pairs` whose targets are available.
pub fn evaluate_loss(
    model: &KpmModel,
    encoder: &KeyEncoder,
    pairs: &[WindowPair],
    targets: &[Option<Vec<Vec<f64>>>],
    loss: LossKind,
) -> Result<f64> {
    let idx: Vec<usize> = (0..pairs.len()).filter(|&i| targets[i].is_some()).collect();
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let m = model.config.branches;
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let keys: Vec<&[f64]> = chunk.iter().map(|&i| pairs[i].key.data()).collect();
        let z = encoder.encode_batch(&keys)?;
        let out = model.predict_batch(&z)?;
        for (b, &i) in chunk.iter().enumerate() {
            let f: Vec<&[f64]> = (0..m).map(|j| out.row(b * m + j)).collect();
            let y = targets[i].as_ref().expect("filtered");
            total += match loss {
                LossKind::Perm => permutation_loss(&f, y)?.loss,
                LossKind::Mse => identity_loss(&f, y)?.loss,
            };
        }
    }
    Ok(total / idx.len() as f64)
}

/// Trains the memory module (and the key encoder feeding it) against
/// leakage-masked futures retrieved from the training split.
pub fn train_kpm(
    train: &[WindowPair],
    val: &[WindowPair],
    mut encoder: KeyEncoder,
    mut model: KpmModel,
    cfg: &KpmTrainConfig,
    audit: bool,
    rng: &mut RngState,
) -> Result<TrainedKpm> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if train[0].value.len() != model.config.horizon || encoder.latent_dim != model.config.latent_dim {
        return Err(Error::Incompatible(format!(
            "pairs have V={}, encoder d={}, but the memory module expects V={}, d={}",
            train[0].value.len(),
            encoder.latent_dim,
            model.config.horizon,
            model.config.latent_dim
        )));
    }
    let m = model.config.branches;
    let mut retriever =
        Retriever { cfg, branches: m, rng: rng.fork("kpm-index"), audit, leak_violations: 0, audit_log: Vec::new() };
    let mut order_rng = rng.fork("kpm-order");

    let mut adam_model = AdamState::for_store(&model.store);
    let mut adam_enc = AdamState::for_store(&encoder.store);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.store.clone(), encoder.store.clone());
    let mut since_best = 0;

    let mut index = retriever.build(train, &encoder)?;
    let mut train_t = retriever.targets(&index, &encoder, train)?;
    let mut val_t = retriever.targets(&index, &encoder, val)?;

    for epoch in 0..=cfg.max_epochs {
        if epoch > 1 && (epoch - 1) % cfg.refresh_every == 0 {
            retriever.retire(&index);
            index = retriever.build(train, &encoder)?;
            train_t = retriever.targets(&index, &encoder, train)?;
            val_t = retriever.targets(&index, &encoder, val)?;
        }
        if train_t.skipped as f64 > cfg.max_skip_fraction * train.len() as f64 {
            return Err(Error::Retrieval(format!(
                "{} of {} training samples found no leakage-free candidates",
                train_t.skipped,
                train.len()
            )));
        }

        let train_loss = if epoch == 0 {
            evaluate_loss(&model, &encoder, train, &train_t.targets, cfg.loss)?
        } else {
            let mut order: Vec<usize> = (0..train.len()).filter(|&i| train_t.targets[i].is_some()).collect();
            order_rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                total += train_step(&mut model, &mut encoder, train, &train_t.targets, batch, cfg, &mut adam_model, &mut adam_enc)?;
            }
            total / order.len().max(1) as f64
        };
        let val_loss = evaluate_loss(&model, &encoder, val, &val_t.targets, LossKind::Perm)?;
        if !train_loss.is_finite() || (!val.is_empty() && !val_loss.is_finite() && val_t.skipped < val.len()) {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch} (train {train_loss}, val {val_loss})")));
        }
        history.records.push(EpochRecord { epoch, train_loss, val_loss, skipped_samples: train_t.skipped });
        log::debug!("kpm epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        let score = if val_loss.is_finite() { val_loss } else { train_loss };
        if score < best.0 {
            best = (score, model.store.clone(), encoder.store.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    retriever.retire(&index);

    model.store.load_from(&best.1)?;
    encoder.store.load_from(&best.2)?;
    let final_index = MemoryIndex::build(train, &encoder, cfg.n_cells, &mut retriever.rng)?;
    Ok(TrainedKpm {
        model,
        encoder,
        index: final_index,
        history,
        leak_violations: retriever.leak_violations,
        audit: retriever.audit_log,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut KpmModel,
    encoder: &mut KeyEncoder,
    pairs: &[WindowPair],
    targets: &[Option<Vec<Vec<f64>>>],
    batch: &[usize],
    cfg: &KpmTrainConfig,
    adam_model: &mut AdamState,
    adam_enc: &mut AdamState,
) -> Result<f64> {
    let m = model.config.branches;
    let v = model.config.horizon;
    let b = batch.len();
    let keys: Vec<&[f64]> = batch.iter().map(|&i| pairs[i].key.data()).collect();
    let x = encoder.prepare_batch(&keys)?;

    let mut g = Graph::new();
    let xv = g.constant(x);
    let z = encoder.forward(&mut g, &encoder.store, xv)?;
    let out = model.forward(&mut g, &model.store, z)?;

    let pred = g.value(out);
    let mut aligned = Vec::with_capacity(b * m * v);
    let mut batch_loss = 0.0;
    for (bi, &i) in batch.iter().enumerate() {
        let f: Vec<&[f64]> = (0..m).map(|j| pred.row(bi * m + j)).collect();
        let y = targets[i].as_ref().expect("batch holds retrievable samples");
        let r = match cfg.loss {
            LossKind::Perm => permutation_loss(&f, y)?,
            LossKind::Mse => identity_loss(&f, y)?,
        };
        batch_loss += r.loss;
        for &n in &r.assignment {
            aligned.extend_from_slice(&y[n]);
        }
    }
    let target = Tensor::new(&[b * m, v], aligned)?;
    let loss = g.sq_err_sum(out, target)?;
    let loss = g.scale(loss, 1.0 / b as f64)?;
    let mut grads = g.backward(loss)?;
    if cfg.grad_clip > 0.0 {
        let norm = grads.norm();
        if norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
    }
    adam_step(&mut model.store, &grads, adam_model, &cfg.adam)?;
    adam_step(&mut encoder.store, &grads, adam_enc, &cfg.adam)?;
    Ok(batch_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::index::EntrySource;
    use crate::kpm::model::KpmConfig;

    #[test]
    fn duplicate_futures_are_skipped_in_target_selection() {
        let srcs = vec![
            EntrySource { series_id: "a".into(), channel: 0, t: 100, latent: vec![0.0], value: vec![1.0, 1.0] },
            EntrySource { series_id: "a".into(), channel: 0, t: 200, latent: vec![0.1], value: vec![1.0, 1.0] },
            EntrySource { series_id: "a".into(), channel: 0, t: 300, latent: vec![0.2], value: vec![-1.0, 2.0] },
        ];
        let idx = MemoryIndex::from_sources(srcs, 1, 2, 3, Some(1), &mut RngState::new(0)).unwrap();
        let mask = LeakageMask::new("b", 0, 0, 5);
        let t = select_targets(&idx, &[0.0], &mask, 2, 3, 1, 1e-2).unwrap();
        assert_eq!(t, vec![vec![1.0, 1.0], vec![-1.0, 2.0]]);
        let t = select_targets(&idx, &[0.0], &mask, 3, 3, 1, 1e-2).unwrap();
        assert_eq!(t[2], vec![1.0, 1.0]);
    }

    fn sine_pairs(n: usize, split: Split, offset: usize) -> Vec<WindowPair> {
        (0..n)
            .map(|i| {
                let t = offset + i * 7;
                let xs: Vec<f64> = (t..t + 8).map(|s| (s as f64 * 0.4).sin()).collect();
                WindowPair {
                    series_id: "s".into(),
                    channel: 0,
                    t,
                    key: Tensor::new(&[6, 1], xs[..6].to_vec()).unwrap(),
                    value: Tensor::new(&[2, 1], xs[6..].to_vec()).unwrap(),
                    split,
                }
            })
            .collect()
    }

    #[test]
    fn short_training_run_is_sane_and_reproducible() {
        let train = sine_pairs(60, Split::Train, 0);
        let val = sine_pairs(10, Split::Val, 1000);
        let cfg = KpmTrainConfig { max_epochs: 6, refresh_every: 2, batch_size: 8, adam: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let kcfg = KpmConfig {
            latent_dim: 4,
            hidden: 8,
            branches: 2,
            horizon: 2,
            chunk: 1,
            ctx_tokens: 2,
            enc_depth: 1,
            enc_heads: 2,
            dec_depth: 1,
            dec_heads: 2,
            ffn_mult: 2,
        };
        let run = || {
            let mut rng = RngState::new(17);
            let enc = KeyEncoder::new(6, 4, &mut rng).unwrap();
            let model = KpmModel::new(kcfg, &mut rng).unwrap();
            train_kpm(&train, &val, enc, model, &cfg, true, &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a.history.records[0].epoch, 0);
        assert!(a.history.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        assert!(a.history.best_val().unwrap() <= a.history.initial_val().unwrap());
        assert_eq!(a.leak_violations, 0);
        assert!(!a.audit.is_empty());
        for e in &a.audit {
            for (s, c, t) in &e.hits {
                assert!(!e.query.excludes(s, *c, *t));
            }
        }
        let b = run();
        assert_eq!(a.model.store.checksum(), b.model.store.checksum());
        assert_eq!(a.history, b.history);
    }
}
