use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::KeyEncoder;
use crate::kpm::model::{KpmConfig, KpmModel};
use crate::numerics::RngState;
use crate::persist::{ArtifactHeader, Checkpoint};

pub const KPM_KIND: &str = "kpm";

/// Everything needed to rebuild the memory module and its key encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpmArtifact {
    pub kpm: KpmConfig,
    pub key_len: usize,
    pub standardize_keys: bool,
}

pub fn kpm_checkpoint(model: &KpmModel, encoder: &KeyEncoder, seed: u64, run: toml::Table) -> Result<Checkpoint> {
    let meta = KpmArtifact { kpm: model.config, key_len: encoder.key_len, standardize_keys: encoder.standardize };
    let header = ArtifactHeader::new(KPM_KIND, seed, meta, run).to_toml()?;
    let mut ck = Checkpoint::new(KPM_KIND, header);
    ck.push_store("kpm", &model.store);
    ck.push_store("key_encoder", &encoder.store);
    Ok(ck)
}

pub fn kpm_from_checkpoint(ck: &Checkpoint) -> Result<(KpmModel, KeyEncoder, ArtifactHeader<KpmArtifact>)> {
    ck.expect_kind(KPM_KIND)?;
    let header: ArtifactHeader<KpmArtifact> = ArtifactHeader::from_toml(&ck.header)?;
    let meta = header.model;
    let mut rng = RngState::new(0);
    let mut model = KpmModel::new(meta.kpm, &mut rng)?;
    let mut encoder = KeyEncoder::new(meta.key_len, meta.kpm.latent_dim, &mut rng)?;
    encoder.standardize = meta.standardize_keys;
    ck.restore_store("kpm", &mut model.store)?;
    ck.restore_store("key_encoder", &mut encoder.store)?;
    let expected = model.store.len() + encoder.store.len();
    if ck.blocks.len() != expected {
        return Err(Error::Format(format!("checkpoint has {} blocks, model needs {}", ck.blocks.len(), expected)));
    }
    Ok((model, encoder, header))
}

pub fn save_kpm(path: &Path, model: &KpmModel, encoder: &KeyEncoder, seed: u64, run: toml::Table) -> Result<()> {
    kpm_checkpoint(model, encoder, seed, run)?.save(path)
}

pub fn load_kpm(path: &Path) -> Result<(KpmModel, KeyEncoder, ArtifactHeader<KpmArtifact>)> {
    kpm_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = RngState::new(8);
        let mut cfg = KpmConfig::for_horizon(4);
        cfg.latent_dim = 6;
        cfg.hidden = 8;
        let model = KpmModel::new(cfg, &mut rng).unwrap();
        let enc = KeyEncoder::new(5, 6, &mut rng).unwrap();
        let bytes = kpm_checkpoint(&model, &enc, 3, toml::Table::new()).unwrap().to_bytes();
        let (m2, e2, h) = kpm_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(h.seed, 3);
        assert_eq!(kpm_checkpoint(&m2, &e2, 3, toml::Table::new()).unwrap().to_bytes(), bytes);
        let z = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        assert_eq!(model.predict(&z).unwrap(), m2.predict(&z).unwrap());
    }
}
