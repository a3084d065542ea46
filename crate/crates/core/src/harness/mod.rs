//! Synthetic data, manifests, configuration and the pipeline stages that the
//! command-line tool chains together.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use dataset::{box_reads, Dataset, Record};
pub use synth::{Split, SyntheticSpec};
