use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{dropout_mask, Encoder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};

fn default_gated() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Token width `d_f`.
    pub width: usize,
    /// Memory candidates consumed per forecast.
    pub candidates: usize,
    pub horizon: usize,
    pub p_mem: f64,
    pub p_base: f64,
    pub temperature: f64,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// `false` drops the gate and tanh: `ŷ = b + f_head(z)`.
    #[serde(default = "default_gated")]
    pub gated: bool,
}

impl FusionConfig {
    pub fn new(candidates: usize, horizon: usize) -> Self {
        FusionConfig {
            width: 128,
            candidates,
            horizon,
            p_mem: 0.3,
            p_base: 0.1,
            temperature: 1.0,
            depth: 2,
            heads: 4,
            ffn_mult: 2,
            gated: true,
        }
    }

    pub fn tokens(&self) -> usize {
        self.candidates + 1
    }

    fn bottleneck(&self) -> usize {
        (self.width / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.candidates == 0 || self.horizon == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("fusion width, candidates, horizon, heads and ffn_mult must be ≥ 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("fusion width {} must divide by {} heads", self.width, self.heads)));
        }
        if !(0.0 <= self.p_base && self.p_base <= self.p_mem && self.p_mem < 1.0) {
            return Err(Error::Config(format!(
                "dropout rates must satisfy 0 ≤ p_base ≤ p_mem < 1, got p_base={} p_mem={}",
                self.p_base, self.p_mem
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    /// `[B, V]`
    pub fused: Var,
    /// `fused − base`, `[B, V]`
    pub correction: Var,
    /// Pooling weights `[B·(M+1), 1]`, memory tokens first, base last.
    pub weights: Var,
}

/// Evaluated outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBatch {
    pub fused: Tensor,
    pub correction: Tensor,
    pub weights: Tensor,
}

/// One fused forecast with its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub base: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub correction: Vec<f64>,
    pub weights: Vec<f64>,
    pub gate_snapshot: Vec<f64>,
}

/// Memory/base projections, a cross-view encoder, temperature-softmax
/// pooling and a gated residual head on top of the base forecast.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub store: ParamStore,
    mem_in: Linear,
    mem_out: Linear,
    base_in: Linear,
    base_out: Linear,
    pos: ParamId,
    encoder: Encoder,
    score: Linear,
    head: Linear,
    gate: ParamId,
}

impl FusionModel {
    pub fn new(config: FusionConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (w, v, mid) = (config.width, config.horizon, config.bottleneck());
        let mut store = ParamStore::new();
        let mem_in = Linear::new(&mut store, "phi_mem.in", v, mid, rng);
        let mem_out = Linear::new(&mut store, "phi_mem.out", mid, w, rng);
        let base_in = Linear::new(&mut store, "phi_base.in", v, mid, rng);
        let base_out = Linear::new(&mut store, "phi_base.out", mid, w, rng);
        let pos = store.add_xavier("pos", config.tokens(), w, rng);
        let encoder = Encoder::new(&mut store, "enc", config.depth, w, config.heads, config.ffn_mult * w, rng);
        let score = Linear::new(&mut store, "score", w, 1, rng);
        let head = Linear::new(&mut store, "head", w, v, rng);
        let gate = store.add_zeros("gate", &[v]);
        Ok(FusionModel { config, store, mem_in, mem_out, base_in, base_out, pos, encoder, score, head, gate })
    }

    /// The same parameters with the gate and tanh removed.
    pub fn ungated(&self) -> Self {
        let mut m = self.clone();
        m.config.gated = false;
        m
    }

    pub fn gate_id(&self) -> ParamId {
        self.gate
    }

    pub fn pos_id(&self) -> ParamId {
        self.pos
    }

    pub fn score_ids(&self) -> (ParamId, ParamId) {
        (self.score.weight, self.score.bias)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    pub fn gate(&self) -> &[f64] {
        self.store.get(self.gate).data()
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, base: bool) -> Result<Var> {
        let (a, b) = if base { (&self.base_in, &self.base_out) } else { (&self.mem_in, &self.mem_out) };
        let h = a.forward(g, store, x)?;
        let h = g.gelu(h)?;
        b.forward(g, store, h)
    }

    /// `base` is `[B, V]`, `candidates` `[B·M, V]` with row `b·M + m`.
    /// Dropout is applied when `dropout` carries a random source.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        base: Var,
        candidates: Var,
        dropout: Option<&mut RngState>,
    ) -> Result<FusionVars> {
        let cfg = &self.config;
        let (m, v, w) = (cfg.candidates, cfg.horizon, cfg.width);
        let b = g.value(base).rows();
        if g.value(base).cols() != v || g.value(candidates).shape() != [b * m, v] {
            return Err(Error::shape(
                "fusion_forward",
                format!("base {:?} and candidates {:?}, expected [B,{v}] and [B·{m},{v}]", g.value(base).shape(), g.value(candidates).shape()),
            ));
        }
        if !g.value(base).all_finite() || !g.value(candidates).all_finite() {
            return Err(Error::Numeric("non-finite input passed to the fusion head".into()));
        }
        let mut hm = self.project(g, store, candidates, false)?;
        let mut hb = self.project(g, store, base, true)?;
        if let Some(rng) = dropout {
            hm = g.mul_const(hm, dropout_mask(&[b * m, w], cfg.p_mem, rng))?;
            hb = g.mul_const(hb, dropout_mask(&[b, w], cfg.p_base, rng))?;
        }
        let all = g.concat_rows(hm, hb)?;
        let order: Vec<usize> = (0..b).flat_map(|i| (i * m..(i + 1) * m).chain([b * m + i])).collect();
        let tokens = g.gather_rows(all, order)?;
        let pos = g.param(store, self.pos);
        let pos = g.tile_rows(pos, b)?;
        let tokens = g.add(tokens, pos)?;
        let z = self.encoder.forward(g, store, tokens, cfg.tokens())?;

        let s = self.score.forward(g, store, z)?;
        let s = g.scale(s, 1.0 / cfg.temperature)?;
        let weights = g.group_softmax(s, cfg.tokens())?;
        let pooled = g.group_weighted_sum(weights, z, cfg.tokens())?;
        let u = self.head.forward(g, store, pooled)?;
        let correction = if cfg.gated {
            let t = g.tanh(u)?;
            let gate = g.param(store, self.gate);
            g.mul_row(t, gate)?
        } else {
            u
        };
        let fused = g.add(base, correction)?;
        Ok(FusionVars { fused, correction, weights })
    }

    pub fn predict_batch(&self, base: &Tensor, candidates: &Tensor) -> Result<FusionBatch> {
        let mut g = Graph::new();
        let bv = g.constant(base.clone());
        let cv = g.constant(candidates.clone());
        let out = self.forward(&mut g, &self.store, bv, cv, None)?;
        Ok(FusionBatch {
            fused: g.value(out.fused).clone(),
            correction: g.value(out.correction).clone(),
            weights: g.value(out.weights).clone(),
        })
    }

    /// Fuses one base forecast with its `M` memory candidates.
    pub fn fuse(&self, base: &[f64], candidates: &[Vec<f64>], dropout: Option<&mut RngState>) -> Result<ForecastBundle> {
        let (m, v) = (self.config.candidates, self.config.horizon);
        if candidates.len() != m || base.len() != v || candidates.iter().any(|c| c.len() != v) {
            return Err(Error::shape("fuse", format!("expected {m} candidates and a base, all of length {v}")));
        }
        let bt = Tensor::new(&[1, v], base.to_vec())?;
        let ct = Tensor::new(&[m, v], candidates.concat())?;
        let mut g = Graph::new();
        let bv = g.constant(bt);
        let cv = g.constant(ct);
        let out = self.forward(&mut g, &self.store, bv, cv, dropout)?;
        Ok(ForecastBundle {
            base: base.to_vec(),
            candidates: candidates.to_vec(),
            fused: g.value(out.fused).data().to_vec(),
            correction: g.value(out.correction).data().to_vec(),
            weights: g.value(out.weights).data().to_vec(),
            gate_snapshot: self.gate().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(m: usize, v: usize) -> FusionConfig {
        FusionConfig { width: 8, depth: 1, heads: 2, ..FusionConfig::new(m, v) }
    }

    fn inputs(seed: u64, m: usize, v: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = RngState::new(seed);
        let base = (0..v).map(|_| rng.normal()).collect();
        let cands = (0..m).map(|_| (0..v).map(|_| rng.normal()).collect()).collect();
        (base, cands)
    }

    fn randomize_gate(model: &mut FusionModel, seed: u64) {
        let mut rng = RngState::new(seed);
        let id = model.gate_id();
        for g in model.store.get_mut(id).data_mut() {
            *g = rng.normal();
        }
    }

    #[test]
    fn zero_gate_returns_base_exactly() {
        let model = FusionModel::new(small(3, 5), &mut RngState::new(0)).unwrap();
        for seed in 0..5 {
            let (base, cands) = inputs(seed, 3, 5);
            let out = model.fuse(&base, &cands, None).unwrap();
            assert_eq!(out.fused, base);
            let out = model.fuse(&base, &cands, Some(&mut RngState::new(seed))).unwrap();
            assert_eq!(out.fused, base);
        }
    }

    #[test]
    fn correction_is_bounded_by_gate() {
        let mut model = FusionModel::new(small(2, 6), &mut RngState::new(1)).unwrap();
        randomize_gate(&mut model, 2);
        let (hw, _) = model.head_ids();
        for w in model.store.get_mut(hw).data_mut() {
            *w *= 50.0;
        }
        for seed in 0..10 {
            let (base, cands) = inputs(seed, 2, 6);
            let out = model.fuse(&base, &cands, None).unwrap();
            for t in 0..6 {
                assert!(out.correction[t].abs() <= out.gate_snapshot[t].abs());
                assert_eq!(out.fused[t], out.base[t] + out.correction[t]);
            }
            let s: f64 = out.weights.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(out.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn zero_score_head_gives_uniform_weights() {
        let mut model = FusionModel::new(small(3, 4), &mut RngState::new(3)).unwrap();
        let (sw, sb) = model.score_ids();
        model.store.get_mut(sw).data_mut().fill(0.0);
        model.store.get_mut(sb).data_mut().fill(0.0);
        let (base, cands) = inputs(4, 3, 4);
        let out = model.fuse(&base, &cands, None).unwrap();
        assert_eq!(out.weights, vec![0.25; 4]);
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let mut model = FusionModel::new(small(2, 4), &mut RngState::new(5)).unwrap();
        for part in ["in.weight", "in.bias", "out.weight", "out.bias"] {
            let t = model.store.get(model.store.id_of(&format!("phi_base.{part}")).unwrap()).clone();
            model.store.set(&format!("phi_mem.{part}"), t).unwrap();
        }
        let pos = model.pos_id();
        model.store.get_mut(pos).data_mut().fill(0.0);
        let base = vec![0.3, -0.1, 0.8, 0.2];
        let out = model.fuse(&base, &[base.clone(), base.clone()], None).unwrap();
        for w in &out.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12, "{:?}", out.weights);
        }
    }

    #[test]
    fn tiny_temperature_concentrates_weights() {
        let mut cfg = small(3, 4);
        cfg.temperature = 1e-6;
        let model = FusionModel::new(cfg, &mut RngState::new(6)).unwrap();
        let (base, cands) = inputs(7, 3, 4);
        let out = model.fuse(&base, &cands, None).unwrap();
        let max = out.weights.iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.999, "{:?}", out.weights);
    }

    #[test]
    fn eval_mode_is_bit_deterministic_and_train_mode_is_not() {
        let mut model = FusionModel::new(small(2, 4), &mut RngState::new(8)).unwrap();
        randomize_gate(&mut model, 9);
        let (base, cands) = inputs(10, 2, 4);
        let a = model.fuse(&base, &cands, None).unwrap();
        let b = model.fuse(&base, &cands, None).unwrap();
        assert_eq!(a, b);
        let c = model.fuse(&base, &cands, Some(&mut RngState::new(1))).unwrap();
        assert_ne!(a.fused, c.fused);
    }

    #[test]
    fn ungated_variant_differs_by_tanh_curvature_only() {
        let mut model = FusionModel::new(small(2, 4), &mut RngState::new(11)).unwrap();
        let gate = model.gate_id();
        model.store.get_mut(gate).data_mut().fill(1.0);
        let (hw, hb) = model.head_ids();
        for w in model.store.get_mut(hw).data_mut() {
            *w *= 0.01;
        }
        model.store.get_mut(hb).data_mut().fill(0.001);
        let plain = model.ungated();
        for seed in 0..5 {
            let (base, cands) = inputs(seed, 2, 4);
            let a = model.fuse(&base, &cands, None).unwrap();
            let b = plain.fuse(&base, &cands, None).unwrap();
            for t in 0..4 {
                let u = b.correction[t];
                assert!((a.fused[t] - b.fused[t]).abs() <= (u - u.tanh()).abs() + 1e-15);
            }
        }
        model.store.get_mut(hw).data_mut().fill(0.0);
        model.store.get_mut(hb).data_mut().fill(0.0);
        let (base, cands) = inputs(0, 2, 4);
        assert_eq!(model.fuse(&base, &cands, None).unwrap().fused, base);
        assert_eq!(model.ungated().fuse(&base, &cands, None).unwrap().fused, base);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let model = FusionModel::new(small(2, 3), &mut RngState::new(0)).unwrap();
        assert!(matches!(model.fuse(&[0.0, f64::NAN, 0.0], &[vec![0.0; 3], vec![0.0; 3]], None), Err(Error::Numeric(_))));
        assert!(model.fuse(&[0.0; 3], &[vec![0.0; 3]], None).is_err());
        let bad = FusionConfig { p_base: 0.5, p_mem: 0.2, ..small(2, 3) };
        assert!(FusionModel::new(bad, &mut RngState::new(0)).is_err());
        let bad = FusionConfig { temperature: 0.0, ..small(2, 3) };
        assert!(FusionModel::new(bad, &mut RngState::new(0)).is_err());
    }
}
