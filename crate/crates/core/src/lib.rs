pub mod error;
pub mod data;
pub mod eval;
pub mod forecasters;
pub mod fusion;
pub mod index;
pub mod kpm;
pub mod numerics;
pub mod persist;
pub mod pipeline;

pub use error::{Error, Result};
