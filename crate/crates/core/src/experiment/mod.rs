//! Experiment configuration and the staged desk-scale pipeline:
//! `synth -> train -> generate -> extract -> probe -> interp -> map -> report`.
//! Each stage reads its inputs from, and writes its artifacts to, the
//! configured output directory.

mod config;
mod pipeline;
pub mod plot;

pub use config::{
    CganConfig, DatasetSource, EmbeddingConfig, ExperimentConfig, FeatureConfig, InterpConfig, MappingConfig, ProbeConfig, SyntheticConfig,
    TileSourceConfig, TrainFeatureSource,
};
pub use pipeline::{
    extract, generate, generate_views, interp, map, probe, report, run_all, split_indices, synth, train, FakeImageScore, MapScore, Summary,
    TrainOutcome, Workspace, CONFIG_FILE,
};
