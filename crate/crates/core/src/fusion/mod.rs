//! Gated fusion of memory candidates with a frozen base forecast.

pub mod checkpoint;
pub mod model;
pub mod train;

pub use checkpoint::{fusion_checkpoint, fusion_from_checkpoint, load_fusion, save_fusion, FUSION_KIND};
pub use model::{ForecastBundle, FusionBatch, FusionConfig, FusionModel, FusionVars};
pub use train::{evaluate_fusion, predict_fusion, train_fusion, FusionData, FusionTrainConfig, TrainedFusion};
