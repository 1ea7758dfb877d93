//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // vector math
    #[error("cannot normalize a vector with norm below 1e-12")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("input vector is empty")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("similarity {value} drifts outside [-1, 1] by more than 1e-9")]
    NotNormalized { value: f64 },

    // encoder
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("backend does not support text-path gradients")]
    GradientUnsupported,
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("template must contain exactly one {{}} placeholder: {0:?}")]
    InvalidTemplate(String),

    // miner
    #[error("image {0} admits no valid crop box")]
    DegenerateImage(String),
    #[error("need at least 2*Q = {needed} crops, got {got}")]
    InsufficientCrops { needed: usize, got: usize },

    // prompt learning
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("operation requires at least one OOD prompt")]
    NoOodPrompts,
    #[error("diversity term requires at least 2 OOD prompts, got {0}")]
    TooFewPrompts(usize),
    #[error("training diverged at step {step}: loss became non-finite")]
    DivergenceDetected {
        step: usize,
        history: Vec<crate::prompt::StepRecord>,
    },

    // detection / metrics
    #[error("score list is empty")]
    EmptyScores,
    #[error("invalid target TPR {0}: must be in (0, 1]")]
    InvalidTargetTpr(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // harness
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("unknown label {label:?} in manifest {manifest}")]
    UnknownLabel { label: String, manifest: String },
    #[error("manifest {0} contains no samples")]
    EmptyManifest(String),
    #[error("class {class:?} has {available} samples, need {needed}")]
    InsufficientSamples {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image decode failed: {0}")]
    ImageDecode(String),
}
