//! Configuration, file formats, synthetic data and the command entry points.

mod binfmt;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod export;
pub mod latent;

pub use checkpoint::Checkpoint;
pub use commands::{
    cmd_flops, cmd_gen_data, cmd_ingest, cmd_mask_dump, cmd_sample, cmd_train, init_state, FlopsRequest,
    GenDataRequest, SampleRequest, TrainData, TrainSummary, Weights, METRICS_HEADER,
};
pub use config::{DataSpec, OutputSpec, RunConfig};
pub use data::{SyntheticDataset, SyntheticKind};
pub use latent::LatentSet;
