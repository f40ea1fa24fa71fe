use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::model::{FusionConfig, FusionModel};
use crate::numerics::RngState;
use crate::persist::{ArtifactHeader, Checkpoint};

pub const FUSION_KIND: &str = "fusion";

pub fn fusion_checkpoint(model: &FusionModel, seed: u64, run: toml::Table) -> Result<Checkpoint> {
    let header = ArtifactHeader::new(FUSION_KIND, seed, model.config, run).to_toml()?;
    let mut ck = Checkpoint::new(FUSION_KIND, header);
    ck.push_store("fusion", &model.store);
    Ok(ck)
}

pub fn fusion_from_checkpoint(ck: &Checkpoint) -> Result<(FusionModel, ArtifactHeader<FusionConfig>)> {
    ck.expect_kind(FUSION_KIND)?;
    let header: ArtifactHeader<FusionConfig> = ArtifactHeader::from_toml(&ck.header)?;
    let mut model = FusionModel::new(header.model, &mut RngState::new(0))?;
    ck.restore_store("fusion", &mut model.store)?;
    if ck.blocks.len() != model.store.len() {
        return Err(Error::Format(format!("checkpoint has {} blocks, model needs {}", ck.blocks.len(), model.store.len())));
    }
    Ok((model, header))
}

pub fn save_fusion(path: &Path, model: &FusionModel, seed: u64, run: toml::Table) -> Result<()> {
    fusion_checkpoint(model, seed, run)?.save(path)
}

pub fn load_fusion(path: &Path) -> Result<(FusionModel, ArtifactHeader<FusionConfig>)> {
    fusion_from_checkpoint(&Checkpoint::load(path)?)
}
