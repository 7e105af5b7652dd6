//! Cross-lingual activation-gap analysis over sparse-autoencoder features.

pub mod align;
pub mod analysis;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod ingest;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod sae;
pub mod toy;

pub use error::{Error, Result};
