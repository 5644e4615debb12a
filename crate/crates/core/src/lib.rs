//! Conditional-GAN synthesis of ground-level views and features from small
//! overhead image patches, with the land-cover mapping experiments built
//! on top of the learned discriminator representation.

pub mod cgan;
pub mod checkpoint;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geodata;
pub mod imageops;
pub mod interp;
pub mod mapping;
pub mod nn;
pub mod probes;
pub mod rng;

pub use error::{Error, Result};
