use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::model::FusionModel;
use crate::kpm::{EpochRecord, TrainHistory};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, RngState, Tensor};

/// Precomputed fusion inputs: base forecasts, memory candidates and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionData {
    /// `[N, V]`
    pub base: Tensor,
    /// `[N·M, V]`, row `n·M + m`
    pub candidates: Tensor,
    /// `[N, V]`
    pub target: Tensor,
    pub branches: usize,
}

impl FusionData {
    pub fn new(base: Tensor, candidates: Tensor, target: Tensor, branches: usize) -> Result<Self> {
        let (n, v) = (base.rows(), base.cols());
        if target.shape() != base.shape() || candidates.shape() != [n * branches, v] {
            return Err(Error::shape(
                "FusionData",
                format!("base {:?}, candidates {:?}, target {:?} with M={branches}", base.shape(), candidates.shape(), target.shape()),
            ));
        }
        Ok(FusionData { base, candidates, target, branches })
    }

    pub fn len(&self) -> usize {
        self.base.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.base.cols()
    }

    /// Rows `idx` of every tensor.
    pub fn select(&self, idx: &[usize]) -> Result<FusionData> {
        let (m, v) = (self.branches, self.horizon());
        let pick = |t: &Tensor, per: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(idx.len() * per * v);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * per * v..(i + 1) * per * v]);
            }
            Tensor::new(&[idx.len() * per, v], data)
        };
        FusionData::new(pick(&self.base, 1)?, pick(&self.candidates, m)?, pick(&self.target, 1)?, m)
    }

    /// Keeps only the first `k` candidates of each sample.
    pub fn truncate_candidates(&self, k: usize) -> Result<FusionData> {
        if k == 0 || k > self.branches {
            return Err(Error::Config(format!("cannot keep {k} of {} candidates", self.branches)));
        }
        let v = self.horizon();
        let mut data = Vec::with_capacity(self.len() * k * v);
        for n in 0..self.len() {
            let start = n * self.branches * v;
            data.extend_from_slice(&self.candidates.data()[start..start + k * v]);
        }
        FusionData::new(self.base.clone(), Tensor::new(&[self.len() * k, v], data)?, self.target.clone(), k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Learning-rate multiplier for the stepwise gate, which starts at zero
    /// and would otherwise need many epochs to reach the output scale.
    pub gate_lr_scale: f64,
    pub adam: AdamConfig,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig { max_epochs: 200, patience: 10, batch_size: 32, grad_clip: 1.0, gate_lr_scale: 10.0, adam: AdamConfig::default() }
    }
}

impl FusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("fusion batch_size must be ≥ 1".into()));
        }
        if !(self.gate_lr_scale > 0.0) {
            return Err(Error::Config(format!("gate_lr_scale must be > 0, got {}", self.gate_lr_scale)));
        }
        Ok(())
    }
}

pub struct TrainedFusion {
    pub model: FusionModel,
    pub history: TrainHistory,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    crate::numerics::tensor::squared_distance(a.data(), b.data()) / a.len().max(1) as f64
}

/// Eval-mode mean squared error of the fused forecast.
pub fn evaluate_fusion(model: &FusionModel, data: &FusionData) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let fused = predict_fusion(model, data)?;
    Ok(mse(&fused, &data.target))
}

/// Eval-mode fused forecasts `[N, V]`.
pub fn predict_fusion(model: &FusionModel, data: &FusionData) -> Result<Tensor> {
    if data.branches != model.config.candidates || data.horizon() != model.config.horizon {
        return Err(Error::Incompatible(format!(
            "data has M={} V={}, fusion head expects M={} V={}",
            data.branches,
            data.horizon(),
            model.config.candidates,
            model.config.horizon
        )));
    }
    let mut out = Vec::with_capacity(data.len() * data.horizon());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let part = data.select(chunk)?;
        out.extend_from_slice(model.predict_batch(&part.base, &part.candidates)?.fused.data());
    }
    Tensor::new(&[data.len(), data.horizon()], out)
}

/// Minimizes fused-vs-target MSE; only the fusion parameters move.
pub fn train_fusion(
    train: &FusionData,
    val: &FusionData,
    mut model: FusionModel,
    cfg: &FusionTrainConfig,
    rng: &mut RngState,
) -> Result<TrainedFusion> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no fusion training samples".into()));
    }
    let mut order_rng = rng.fork("fusion-order");
    let mut drop_rng = rng.fork("fusion-dropout");
    let mut adam = AdamState::for_store(&model.store);
    adam.set_lr_scale(model.gate_id(), cfg.gate_lr_scale);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut since_best = 0;

    for epoch in 0..=cfg.max_epochs {
        let train_loss = if epoch == 0 {
            evaluate_fusion(&model, train)?
        } else {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order_rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let part = train.select(batch)?;
                total += step(&mut model, &part, cfg, &mut adam, &mut drop_rng)? * batch.len() as f64;
            }
            total / train.len() as f64
        };
        let val_loss = evaluate_fusion(&model, val)?;
        if !train_loss.is_finite() || (!val.is_empty() && !val_loss.is_finite()) {
            return Err(Error::Numeric(format!("fusion loss diverged at epoch {epoch} (train {train_loss}, val {val_loss})")));
        }
        history.records.push(EpochRecord { epoch, train_loss, val_loss, skipped_samples: 0 });
        log::debug!("fusion epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        let score = if val.is_empty() { train_loss } else { val_loss };
        if score < best.0 {
            best = (score, model.store.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.store.load_from(&best.1)?;
    Ok(TrainedFusion { model, history })
}

fn step(model: &mut FusionModel, batch: &FusionData, cfg: &FusionTrainConfig, adam: &mut AdamState, rng: &mut RngState) -> Result<f64> {
    let mut g = Graph::new();
    let base = g.constant(batch.base.clone());
    let cands = g.constant(batch.candidates.clone());
    let out = model.forward(&mut g, &model.store, base, cands, Some(rng))?;
    let loss = g.sq_err_sum(out.fused, batch.target.clone())?;
    let loss = g.scale(loss, 1.0 / batch.target.len() as f64)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    if cfg.grad_clip > 0.0 {
        let norm = grads.norm();
        if norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
    }
    adam_step(&mut model.store, &grads, adam, &cfg.adam)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::model::FusionConfig;

    fn cfg(m: usize, v: usize) -> FusionConfig {
        FusionConfig { width: 16, depth: 1, heads: 2, p_mem: 0.1, p_base: 0.0, ..FusionConfig::new(m, v) }
    }

    /// Smooth targets with candidates built by `cand` and bases by `base`.
    fn synth(n: usize, seed: u64, base: impl Fn(&[f64], &mut RngState) -> Vec<f64>, cand: impl Fn(&[f64], &mut RngState) -> Vec<f64>) -> FusionData {
        let (m, v) = (2, 4);
        let mut rng = RngState::new(seed);
        let (mut b, mut c, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let phase = rng.uniform() * 6.0;
            let y: Vec<f64> = (0..v).map(|j| (phase + j as f64 * 0.5).sin()).collect();
            b.extend(base(&y, &mut rng));
            for _ in 0..m {
                c.extend(cand(&y, &mut rng));
            }
            t.extend(y);
        }
        FusionData::new(
            Tensor::new(&[n, v], b).unwrap(),
            Tensor::new(&[n * m, v], c).unwrap(),
            Tensor::new(&[n, v], t).unwrap(),
            m,
        )
        .unwrap()
    }

    fn base_mse(d: &FusionData) -> f64 {
        mse(&d.base, &d.target)
    }

    #[test]
    fn learns_from_accurate_memory() {
        let make = |seed| synth(200, seed, |y, _| y.iter().map(|v| v + 0.8).collect(), |y, _| y.to_vec());
        let (train, val, test) = (make(1), make(2), make(3));
        let tc = FusionTrainConfig { max_epochs: 30, adam: AdamConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let mut rng = RngState::new(4);
        let model = FusionModel::new(cfg(2, 4), &mut rng).unwrap();
        let out = train_fusion(&train, &val, model, &tc, &mut rng).unwrap();
        let fused = evaluate_fusion(&out.model, &test).unwrap();
        assert!(fused < 0.5 * base_mse(&test), "fused {fused} vs base {}", base_mse(&test));
    }

    #[test]
    fn ignores_noise_memory_when_base_is_exact() {
        let make = |seed| synth(200, seed, |y, _| y.to_vec(), |_, r| (0..4).map(|_| r.normal()).collect());
        let (train, val, test) = (make(5), make(6), make(7));
        let tc = FusionTrainConfig { max_epochs: 20, ..Default::default() };
        let mut rng = RngState::new(8);
        let model = FusionModel::new(cfg(2, 4), &mut rng).unwrap();
        let out = train_fusion(&train, &val, model, &tc, &mut rng).unwrap();
        let fused = evaluate_fusion(&out.model, &test).unwrap();
        assert!(fused <= base_mse(&test) + 1e-3, "{fused}");
    }

    #[test]
    fn zero_epochs_keep_the_initial_model() {
        let d = synth(20, 9, |y, _| y.to_vec(), |y, _| y.to_vec());
        let mut rng = RngState::new(10);
        let model = FusionModel::new(cfg(2, 4), &mut rng).unwrap();
        let before = predict_fusion(&model, &d).unwrap();
        let tc = FusionTrainConfig { max_epochs: 0, ..Default::default() };
        let out = train_fusion(&d, &d, model, &tc, &mut rng).unwrap();
        assert_eq!(predict_fusion(&out.model, &d).unwrap(), before);
        assert_eq!(out.history.records.len(), 1);
    }

    #[test]
    fn training_is_reproducible() {
        let d = synth(40, 11, |y, _| y.iter().map(|v| v * 0.5).collect(), |y, _| y.to_vec());
        let tc = FusionTrainConfig { max_epochs: 3, ..Default::default() };
        let run = || {
            let mut rng = RngState::new(12);
            let model = FusionModel::new(cfg(2, 4), &mut rng).unwrap();
            train_fusion(&d, &d, model, &tc, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.store.checksum(), b.model.store.checksum());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn truncation_keeps_leading_candidates() {
        let d = synth(3, 13, |y, _| y.to_vec(), |_, r| (0..4).map(|_| r.normal()).collect());
        let t = d.truncate_candidates(1).unwrap();
        assert_eq!(t.candidates.rows(), 3);
        assert_eq!(t.candidates.row(1), d.candidates.row(2));
        assert!(d.truncate_candidates(3).is_err());
    }
}
