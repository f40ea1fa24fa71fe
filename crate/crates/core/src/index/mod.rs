//! Latent key projection and the inverted-file memory index.

pub mod encoder;
pub mod ivf;
pub mod kmeans;

pub use encoder::{standardize_window, KeyEncoder};
pub use ivf::{default_n_cells, default_n_probe, EntrySource, Hit, LeakageMask, MemoryIndex, RetrievalRecord};
