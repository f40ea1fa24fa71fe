//! Finite-difference checks of the trainable networks at desk scale.

use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModel};
use crate::index::KeyEncoder;
use crate::kpm::{permutation_loss, KpmConfig, KpmModel};
use crate::numerics::{check_gradients, GradCheckReport, Graph, RngState, Tensor};

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Key encoder plus memory module: `d=8, d_h=16, M=2, V=4`, two segments.
pub fn desk_kpm_config() -> KpmConfig {
    KpmConfig {
        latent_dim: 8,
        hidden: 16,
        branches: 2,
        horizon: 4,
        chunk: 2,
        ctx_tokens: 2,
        enc_depth: 1,
        enc_heads: 2,
        dec_depth: 1,
        dec_heads: 2,
        ffn_mult: 2,
    }
}

pub fn desk_fusion_config() -> FusionConfig {
    FusionConfig { width: 16, depth: 1, heads: 2, ..FusionConfig::new(2, 4) }
}

fn random(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("sized")
}

/// Checks the key encoder and memory module under the matched loss.
pub fn check_kpm_gradients(seed: u64, cfg: KpmConfig, key_len: usize, batch: usize) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let model = KpmModel::new(cfg, &mut rng)?;
    let encoder = KeyEncoder::new(key_len, cfg.latent_dim, &mut rng)?;
    let keys: Vec<Vec<f64>> = (0..batch).map(|_| (0..key_len).map(|_| rng.normal()).collect()).collect();
    let x = encoder.prepare_batch(&keys)?;
    let targets: Vec<Vec<Vec<f64>>> =
        (0..batch).map(|_| (0..cfg.branches).map(|_| (0..cfg.horizon).map(|_| rng.normal()).collect()).collect()).collect();

    let (mut mstore, mut estore) = (model.store.clone(), encoder.store.clone());
    check_gradients(&mut [&mut mstore, &mut estore], GRADCHECK_EPSILON, GRADCHECK_TOLERANCE, |s| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = encoder.forward(&mut g, s[1], xv)?;
        let out = model.forward(&mut g, s[0], z)?;
        let pred = g.value(out).clone();
        let mut aligned = Vec::with_capacity(pred.len());
        for (b, y) in targets.iter().enumerate() {
            let f: Vec<&[f64]> = (0..cfg.branches).map(|m| pred.row(b * cfg.branches + m)).collect();
            for &n in &permutation_loss(&f, y)?.assignment {
                aligned.extend_from_slice(&y[n]);
            }
        }
        let loss = g.sq_err_sum(out, Tensor::new(pred.shape(), aligned)?)?;
        Ok((g, loss))
    })
}

/// Checks the fusion head in training mode (fixed dropout masks) with a
/// random non-zero gate so every parameter receives gradient.
pub fn check_fusion_gradients(seed: u64, cfg: FusionConfig, batch: usize) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut model = FusionModel::new(cfg, &mut rng)?;
    let gate = model.gate_id();
    for g in model.store.get_mut(gate).data_mut() {
        *g = rng.normal();
    }
    let base = random(&mut rng, &[batch, cfg.horizon]);
    let cands = random(&mut rng, &[batch * cfg.candidates, cfg.horizon]);
    let target = random(&mut rng, &[batch, cfg.horizon]);
    let mask_seed = rng.next_u64();

    let mut store = model.store.clone();
    check_gradients(&mut [&mut store], GRADCHECK_EPSILON, GRADCHECK_TOLERANCE, |s| {
        let mut g = Graph::new();
        let b = g.constant(base.clone());
        let c = g.constant(cands.clone());
        let out = model.forward(&mut g, s[0], b, c, Some(&mut RngState::new(mask_seed)))?;
        let loss = g.sq_err_sum(out.fused, target.clone())?;
        Ok((g, loss))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kpm_and_fusion_gradients_match_finite_differences() {
        for seed in 0..3 {
            let r = check_kpm_gradients(seed, desk_kpm_config(), 6, 2).unwrap();
            assert!(r.passed, "{r:?}");
            let r = check_fusion_gradients(seed, desk_fusion_config(), 2).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
