use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment buffers for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamState { step: 0, lr_scale: vec![1.0; m.len()], v: m.clone(), m }
    }

    /// Multiplies the learning rate of one tensor.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale[id.index()] = scale;
    }
}

/// One Adam update of every parameter in `store` that received a gradient.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", format!("state for {} tensors, store has {}", state.m.len(), store.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        let i = id.index();
        let p = store.get_mut(id);
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::shape("adam_step", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        let lr = cfg.lr * state.lr_scale[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::tensor::Tensor;

    fn grads_for(store: &ParamStore, values: &[f64]) -> Gradients {
        // d/dp of Σ c_i p_i is c_i
        let mut g = Graph::new();
        let mut terms = Vec::new();
        for (id, &c) in store.ids().zip(values) {
            let p = g.param(store, id);
            let s = g.scale(p, c).unwrap();
            terms.push(g.sum(s).unwrap());
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t).unwrap();
        }
        g.backward(total).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.5]));
        let grads = grads_for(&store, &[0.0]);
        let mut st = AdamState::for_store(&store);
        adam_step(&mut store, &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(store.iter().next().unwrap().1.data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn positive_gradient_decreases_param() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0]));
        let grads = grads_for(&store, &[1.0]);
        let mut st = AdamState::for_store(&store);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        adam_step(&mut store, &grads, &mut st, &cfg).unwrap();
        assert!(store.iter().next().unwrap().1.data()[0] < 1.0);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![0.3]));
        store.add("b", Tensor::vector(vec![0.3]));
        let mut st = AdamState::for_store(&store);
        for k in 0..50 {
            let c = (k as f64 * 0.7).sin();
            let grads = grads_for(&store, &[c, c]);
            adam_step(&mut store, &grads, &mut st, &AdamConfig::default()).unwrap();
        }
        let vals: Vec<f64> = store.iter().map(|(_, t)| t.data()[0]).collect();
        assert_eq!(vals[0].to_bits(), vals[1].to_bits());
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0]));
        let grads = grads_for(&store, &[1.0]);
        let mut st = AdamState::for_store(&store);
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(matches!(adam_step(&mut store, &grads, &mut st, &cfg), Err(Error::Config(_))));
    }
}
