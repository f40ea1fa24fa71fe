use crate::error::{Error, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{Graph, ParamStore, RngState, Tensor, Var};

pub const WINDOW_STD_FLOOR: f64 = 1e-8;

/// Subtracts the window mean and divides by the window standard deviation.
pub fn standardize_window(key: &[f64]) -> Vec<f64> {
    let n = key.len() as f64;
    let mean = key.iter().sum::<f64>() / n;
    let var = key.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(WINDOW_STD_FLOOR);
    key.iter().map(|v| (v - mean) / std).collect()
}

/// Two-layer projection from a look-back key to a `latent_dim` vector.
#[derive(Clone, Debug)]
pub struct KeyEncoder {
    pub key_len: usize,
    pub latent_dim: usize,
    pub standardize: bool,
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
}

impl KeyEncoder {
    pub fn new(key_len: usize, latent_dim: usize, rng: &mut RngState) -> Result<Self> {
        if key_len == 0 || latent_dim == 0 {
            return Err(Error::Config(format!("key encoder needs K ≥ 1 and d ≥ 1 (K={key_len}, d={latent_dim})")));
        }
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "in", key_len, latent_dim, rng);
        let l2 = Linear::new(&mut store, "out", latent_dim, latent_dim, rng);
        Ok(KeyEncoder { key_len, latent_dim, standardize: true, store, l1, l2 })
    }

    /// Same layout with every weight and bias set to zero.
    pub fn zeroed(key_len: usize, latent_dim: usize) -> Result<Self> {
        let mut enc = Self::new(key_len, latent_dim, &mut RngState::new(0))?;
        for id in enc.store.ids().collect::<Vec<_>>() {
            enc.store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(enc)
    }

    /// Length/finiteness check plus optional per-window standardization.
    pub fn prepare(&self, key: &[f64]) -> Result<Vec<f64>> {
        if key.len() != self.key_len {
            return Err(Error::shape("encode_key", format!("key length {} but encoder expects {}", key.len(), self.key_len)));
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in look-back key".into()));
        }
        Ok(if self.standardize { standardize_window(key) } else { key.to_vec() })
    }

    /// Stacks prepared keys into a `[B, K]` matrix.
    pub fn prepare_batch<K: AsRef<[f64]>>(&self, keys: &[K]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(keys.len() * self.key_len);
        for k in keys {
            data.extend(self.prepare(k.as_ref())?);
        }
        Tensor::new(&[keys.len(), self.key_len], data)
    }

    /// `x` holds prepared keys, `[B, K]`; returns `[B, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, store, h)
    }

    pub fn encode(&self, key: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[key])?.into_data())
    }

    pub fn encode_batch<K: AsRef<[f64]>>(&self, keys: &[K]) -> Result<Tensor> {
        let x = self.prepare_batch(keys)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, &self.store, xv)?;
        Ok(g.value(out).clone())
    }
}
