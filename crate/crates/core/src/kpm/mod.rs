//! The memory module: a context encoder and a branch-separable decoder that
//! emits `M` future hypotheses, trained with a set-matching loss.

pub mod checkpoint;
pub mod matching;
pub mod model;
pub mod train;

pub use checkpoint::{kpm_checkpoint, kpm_from_checkpoint, load_kpm, save_kpm, KpmArtifact};
pub use matching::{identity_loss, permutation_loss, permutation_loss_with, MatchResult, Solver};
pub use model::{KpmConfig, KpmModel};
pub use train::{select_targets, train_kpm, EpochRecord, KpmTrainConfig, LossKind, TrainHistory, TrainedKpm};
