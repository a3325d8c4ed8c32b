//! Channel catalogue, normalisation, on-disk datasets and synthetic data.

pub mod dataset;
pub mod norm;
pub mod synth;
pub mod variables;

pub use dataset::{
    epoch_order, ingest_external, Dataset, DatasetManifest, DatasetWriter, SampleBatch, SampleEntry, Split,
};
pub use norm::{ChannelStats, NormMode, NormStats, Role};
pub use synth::{default_synthetic_table, gaussian_random_field, synth_generate, SynthOptions};
pub use variables::{build_channel_plan, Level, VariableSpec, VariableTable};
