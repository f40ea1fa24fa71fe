//! Trains the multi-branch memory module on bimodal data with the set
//! loss and reports how far apart its branches end up.
//!
//!     cargo run --release --example train_kpm

use memforecast::eval::branch_diversity;
use memforecast::kpm::LossKind;
use memforecast::pipeline::experiment::{branch_outputs, prepare_dataset, synthesize, train_memory};
use memforecast::pipeline::RunConfig;

fn main() -> memforecast::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/bimodal.toml"))?;
    cfg.synth.n_series = 12;
    cfg.kpm.max_epochs = 20;
    let ds = prepare_dataset(&synthesize(&cfg)?, &cfg)?;
    println!("{} training pairs, {} validation pairs", ds.train.len(), ds.val.len());

    let trained = train_memory(&cfg, &ds.train, &ds.val, LossKind::Perm, false, cfg.seed)?;
    for r in trained.history.records.iter().step_by(5) {
        println!("epoch {:>3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss);
    }
    println!("best epoch {}, leak violations {}", trained.history.best_epoch, trained.leak_violations);

    let branches = branch_outputs(&trained.model, &trained.encoder, &ds.test)?;
    let m = trained.model.config.branches;
    println!("test branch diversity {:.3} (M = {m})", branch_diversity(&branches, m)?);

    let z = trained.encoder.encode(ds.test[0].key.data())?;
    for (i, b) in trained.model.predict(&z)?.iter().enumerate() {
        println!("branch {i}: {:?}", b.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>());
    }
    Ok(())
}
