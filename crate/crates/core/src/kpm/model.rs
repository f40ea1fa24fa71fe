use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kpm::matching::MAX_BRANCHES;
use crate::numerics::nn::{Encoder, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, RngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpmConfig {
    /// Width `d` of the latent key.
    pub latent_dim: usize,
    pub hidden: usize,
    pub branches: usize,
    pub horizon: usize,
    pub chunk: usize,
    /// Tokens the context encoder splits the latent into.
    pub ctx_tokens: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub ffn_mult: usize,
}

impl KpmConfig {
    /// Defaults for a given horizon: `c = V/4` when that divides evenly.
    pub fn for_horizon(horizon: usize) -> Self {
        let chunk = if horizon % 4 == 0 { horizon / 4 } else { horizon };
        KpmConfig {
            latent_dim: 64,
            hidden: 128,
            branches: 3,
            horizon,
            chunk,
            ctx_tokens: 4,
            enc_depth: 2,
            enc_heads: 4,
            dec_depth: 2,
            dec_heads: 4,
            ffn_mult: 2,
        }
    }

    pub fn segments(&self) -> usize {
        self.horizon / self.chunk
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
            ("branches", self.branches),
            ("horizon", self.horizon),
            ("chunk", self.chunk),
            ("ctx_tokens", self.ctx_tokens),
            ("enc_heads", self.enc_heads),
            ("dec_heads", self.dec_heads),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = zero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("kpm.{name} must be ≥ 1")));
        }
        if self.horizon % self.chunk != 0 {
            return Err(Error::Config(format!("horizon {} is not a multiple of chunk {}", self.horizon, self.chunk)));
        }
        if self.hidden % self.enc_heads != 0 || self.hidden % self.dec_heads != 0 {
            return Err(Error::Config(format!("hidden width {} must divide by the head counts", self.hidden)));
        }
        if self.branches > MAX_BRANCHES {
            return Err(Error::Config(format!("at most {MAX_BRANCHES} branches are supported, got {}", self.branches)));
        }
        Ok(())
    }
}

/// Context encoder, per-branch query/position embeddings, a decoder shared
/// by all branches, and a chunk head.
#[derive(Clone, Debug)]
pub struct KpmModel {
    pub config: KpmConfig,
    pub store: ParamStore,
    ctx_proj: Linear,
    ctx_pos: ParamId,
    encoder: Encoder,
    e_query: ParamId,
    e_pos: ParamId,
    decoder: Encoder,
    head: Linear,
}

impl KpmModel {
    pub fn new(config: KpmConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let tokens = config.branches * config.segments();
        let mut store = ParamStore::new();
        let ctx_proj = Linear::new(&mut store, "ctx_proj", config.latent_dim, config.ctx_tokens * h, rng);
        let ctx_pos = store.add_xavier("ctx_pos", config.ctx_tokens, h, rng);
        let encoder = Encoder::new(&mut store, "enc", config.enc_depth, h, config.enc_heads, config.ffn_mult * h, rng);
        let e_query = store.add_xavier("e_query", tokens, h, rng);
        let e_pos = store.add_xavier("e_pos", tokens, h, rng);
        let decoder = Encoder::new(&mut store, "dec", config.dec_depth, h, config.dec_heads, config.ffn_mult * h, rng);
        let head = Linear::new(&mut store, "head", h, config.chunk, rng);
        Ok(KpmModel { config, store, ctx_proj, ctx_pos, encoder, e_query, e_pos, decoder, head })
    }

    pub fn e_query_id(&self) -> ParamId {
        self.e_query
    }

    pub fn e_pos_id(&self) -> ParamId {
        self.e_pos
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    /// Conditioning vector `h` for each latent: `[B, d] → [B, d_h]`.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let cfg = &self.config;
        let b = g.value(z).rows();
        let c = self.ctx_proj.forward(g, store, z)?;
        let c = g.reshape(c, &[b * cfg.ctx_tokens, cfg.hidden])?;
        let pos = g.param(store, self.ctx_pos);
        let pos = g.tile_rows(pos, b)?;
        let c = g.add(c, pos)?;
        let c = self.encoder.forward(g, store, c, cfg.ctx_tokens)?;
        g.group_mean(c, cfg.ctx_tokens)
    }

    /// Decoder output per token, rows ordered `(sample, branch, segment)`:
    /// `[B·M·T, d_h]`.
    pub fn decode_tokens(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let cfg = &self.config;
        let b = g.value(h).rows();
        let per_sample = cfg.branches * cfg.segments();
        let q = g.repeat_rows(h, per_sample)?;
        let eq = g.param(store, self.e_query);
        let ep = g.param(store, self.e_pos);
        let e = g.add(eq, ep)?;
        let e = g.tile_rows(e, b)?;
        let q = g.add(q, e)?;
        self.decoder.forward(g, store, q, cfg.segments())
    }

    /// Latents `[B, d]` to branch forecasts `[B·M, V]` (row `b·M + m`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let cfg = &self.config;
        let b = g.value(z).rows();
        if g.value(z).cols() != cfg.latent_dim {
            return Err(Error::shape("kpm_forward", format!("latent {:?}, expected width {}", g.value(z).shape(), cfg.latent_dim)));
        }
        let h = self.context(g, store, z)?;
        let tokens = self.decode_tokens(g, store, h)?;
        let y = self.head.forward(g, store, tokens)?;
        g.reshape(y, &[b * cfg.branches, cfg.horizon])
    }

    pub fn predict_batch(&self, z: &Tensor) -> Result<Tensor> {
        if !z.all_finite() {
            return Err(Error::Numeric("non-finite latent passed to the memory module".into()));
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &self.store, zv)?;
        Ok(g.value(out).clone())
    }

    /// `M` horizon vectors for one latent.
    pub fn predict(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        let out = self.predict_batch(&Tensor::new(&[1, z.len()], z.to_vec())?)?;
        Ok((0..self.config.branches).map(|m| out.row(m).to_vec()).collect())
    }
}
