//! Layers shared by the memory module and the fusion head.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[fan_out]);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0));
        let beta = store.add_zeros(format!("{name}.beta"), &[width]);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer encoder block:
/// `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_width: usize, rng: &mut RngState) -> Self {
        EncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            wq: Linear::new(store, &format!("{name}.attn.q"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.attn.k"), width, width, rng),
            wv: Linear::new(store, &format!("{name}.attn.v"), width, width, rng),
            wo: Linear::new(store, &format!("{name}.attn.out"), width, width, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width),
            ff_in: Linear::new(store, &format!("{name}.ff.in"), width, ff_width, rng),
            ff_out: Linear::new(store, &format!("{name}.ff.out"), ff_width, width, rng),
            heads,
        }
    }

    /// `x` is `[groups * group, width]`; attention never crosses a group.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, group: usize) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let a = g.grouped_attention(q, k, v, group, self.heads)?;
        let a = self.wo.forward(g, store, a)?;
        let x = g.add(x, a)?;

        let h = self.norm_ff.forward(g, store, x)?;
        let h = self.ff_in.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff_out.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Stack of [`EncoderLayer`]s with a closing layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut RngState,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), width, heads, ff_width, rng))
            .collect();
        Encoder { layers, final_norm: LayerNorm::new(store, &format!("{name}.norm"), width) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, group: usize) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x, group)?;
        }
        self.final_norm.forward(g, store, x)
    }
}

/// Inverted dropout mask: zeros with probability `p`, survivors scaled by `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    if p <= 0.0 {
        return Tensor::filled(shape, 1.0);
    }
    let keep = 1.0 / (1.0 - p);
    let data = (0..n).map(|_| if rng.coin(p) { 0.0 } else { keep }).collect();
    Tensor::new(shape, data).expect("sized")
}
