mod cache;
mod sample;
mod train;

pub use cache::KvCache;
pub use train::{
    draw_indices, gaussian, prepare_batch, step_rng, training_loss, wsd_lr, AdamWConfig, LossReduction,
    PreparedBatch, StepReport, TrainConfig, TrainState, Trainer, WsdSchedule, STREAM_DATA, STREAM_NOISE,
};
pub use sample::{
    sample, sample_recompute, sample_with, CachedPredictor, EpsPredictor, FullSequencePredictor, RecomputePredictor,
    Sampled,
};
