//! Few-shot out-of-distribution detection built on a frozen dual encoder.
//!
//! The pipeline mines "id-like" outliers from random crops of the few-shot
//! in-distribution images, tunes ID and OOD prompt vectors against the frozen
//! encoder, and scores test inputs with a prompt-ratio function. A seeded toy
//! encoder makes every stage runnable and checkable offline; real pretrained
//! encoders plug in behind the [`encoder::Backend`] contract.
//!
//! Modules follow the pipeline order:
//!
//! - [`embed`] — unit-norm embeddings, cosine similarity, stable softmax.
//! - [`encoder`] — the frozen dual-encoder contract and the toy backend.
//! - [`miner`] — random-crop outlier mining.
//! - [`prompt`] — learnable prompts, loss terms, and the tuning loop.
//! - [`detect`] — score functions, threshold calibration, classification.
//! - [`metrics`] — FPR-at-TPR, AUROC, ID accuracy.
//! - [`harness`] — configs, manifests, caches, reports, orchestration.

pub mod cli;
pub mod detect;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod miner;
pub mod prompt;
pub mod rng;

pub use error::{Error, Result};

/// Scalar type for all core math: `f32` or `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

/// Shorthand cast from `f64` literals into the generic scalar.
pub(crate) fn fl<T: Float>(x: f64) -> T {
    T::from(x).expect("f64 constant must convert into the scalar type")
}

pub type Embedding32 = embed::Embedding<f32>;
pub type Embedding64 = embed::Embedding<f64>;
pub type SimilarityRow32 = embed::SimilarityRow<f32>;
pub type SimilarityRow64 = embed::SimilarityRow<f64>;
pub type ToyBackend32 = encoder::ToyBackend<f32>;
pub type ToyBackend64 = encoder::ToyBackend<f64>;
pub type PromptSet32 = prompt::PromptSet<f32>;
pub type PromptSet64 = prompt::PromptSet<f64>;
pub type MinedDatasets64 = miner::MinedDatasets<f64>;
pub type ScoreRecord64 = detect::ScoreRecord<f64>;
