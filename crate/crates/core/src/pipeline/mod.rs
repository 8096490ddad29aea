//! Linear probing, fine-tuning, evaluation, attention masks and feature
//! export.

mod config;
mod dataset;
mod eval;
mod train;

pub use config::{Mode, RunConfig};
pub use dataset::Dataset;
pub use eval::{export_features, load_model, run_attention, run_eval, upsample_mask, AttentionOutput, LoadedModel};
pub use train::{
    evaluate, finetune_loop, initial_params, resolve_splits, run_finetune, run_probe, EpochLog, RunOutcome, Splits,
};
