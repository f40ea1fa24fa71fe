//! Series ingestion, z-scoring, and leakage-free window segmentation.

pub mod normalize;
pub mod series;
pub mod synth;
pub mod windows;

pub use normalize::{normalize, NormStats};
pub use series::{decompose_channels, load_csv, CsvLayout, LoadReport, TimeSeries};
pub use windows::{segment_series, Split, SplitSpec, WindowPair, WindowSpec};
pub use synth::{generate, SynthKind, SynthSpec};
