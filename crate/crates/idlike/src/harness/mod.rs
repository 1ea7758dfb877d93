//! Operational shell: configs, manifests, caches, checkpoints, reports, and
//! the staged experiment pipeline.

pub mod artifacts;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod run;
pub mod toyset;

pub use artifacts::{MinedRecord, ReportRow, ScoreDumpRecord};
pub use cache::EmbeddingCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ConfigMap, EncoderChoice, RunConfig};
pub use manifest::{ingest_dataset, load_image, sample_fewshot, Manifest};
pub use run::{
    evaluate_mixed_dump, run_experiment, stage_eval, stage_mine, stage_score, stage_train,
};
pub use toyset::{generate_toy_dataset, ToyDataset};
