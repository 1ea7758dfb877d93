//! Learnable ID/OOD prompts and the tuning loop against a frozen backend.
//!
//! Each of the K classes gets one learnable prompt (context vectors plus a
//! frozen class-name token); C additional OOD prompts carry context only, no
//! class information. Only context vectors receive gradient updates.

pub mod losses;
pub mod optim;
pub mod train;

pub use losses::{loss_div, loss_in, loss_out, total_loss, LossWeights, OutLossForm};
pub use train::{loss_with_gradients, train, StepBatch, StepLosses};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::encoder::{Backend, TextVjp, TokenSequence};
use crate::rng::stream_rng;
use crate::{fl, Error, Float, Result};

const STREAM_INIT_ID: u64 = 0x20;
const STREAM_INIT_OOD: u64 = 0x21;

/// Standard deviation for random context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Learnable prompt for one ID class: context plus a frozen class token.
#[derive(Debug, Clone, PartialEq)]
pub struct IdPrompt<T: Float> {
    pub context: Vec<Vec<T>>,
    pub class_token: Vec<T>,
    pub class_name: String,
}

/// Learnable OOD prompt: context only, no class slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OodPrompt<T: Float> {
    pub context: Vec<Vec<T>>,
}

/// The trainable state: K ID prompts and C OOD prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T: Float> {
    pub id_prompts: Vec<IdPrompt<T>>,
    pub ood_prompts: Vec<OodPrompt<T>>,
    pub token_len: usize,
    pub ctx_dim: usize,
}

impl<T: Float> PromptSet<T> {
    pub fn num_classes(&self) -> usize {
        self.id_prompts.len()
    }

    pub fn num_ood(&self) -> usize {
        self.ood_prompts.len()
    }

    /// Token sequence for ID prompt `k`: L context vectors then the class
    /// token, with `class_slot` marking the frozen position.
    pub fn id_token_sequence(&self, k: usize) -> TokenSequence<T> {
        let p = &self.id_prompts[k];
        let mut entries = p.context.clone();
        entries.push(p.class_token.clone());
        TokenSequence {
            entries,
            class_slot: Some(self.token_len),
        }
    }

    pub fn ood_token_sequence(&self, c: usize) -> TokenSequence<T> {
        TokenSequence {
            entries: self.ood_prompts[c].context.clone(),
            class_slot: None,
        }
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        (self.id_prompts.len() + self.ood_prompts.len()) * self.token_len * self.ctx_dim
    }

    /// Flatten all context vectors: ID prompts first, then OOD prompts,
    /// each row-major over (position, dimension).
    pub fn pack_context(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.param_count());
        for p in &self.id_prompts {
            for row in &p.context {
                flat.extend_from_slice(row);
            }
        }
        for p in &self.ood_prompts {
            for row in &p.context {
                flat.extend_from_slice(row);
            }
        }
        flat
    }

    /// Inverse of [`PromptSet::pack_context`].
    pub fn unpack_context(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.chunks_exact(self.ctx_dim);
        for p in &mut self.id_prompts {
            for row in &mut p.context {
                row.copy_from_slice(it.next().expect("chunk count matches param count"));
            }
        }
        for p in &mut self.ood_prompts {
            for row in &mut p.context {
                row.copy_from_slice(it.next().expect("chunk count matches param count"));
            }
        }
    }
}

/// Initialize prompts with zero-mean Gaussian context (std 0.02).
///
/// ID prompt k carries the frozen class token of `class_names[k]`.
pub fn init_prompts<T: Float>(
    class_names: &[String],
    num_ood: usize,
    token_len: usize,
    seed: u64,
    backend: &dyn Backend<T>,
) -> Result<PromptSet<T>> {
    if class_names.is_empty() || token_len == 0 {
        return Err(Error::EmptyInput);
    }
    let ctx_dim = backend.text_context_dim();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<T>> {
        (0..token_len)
            .map(|_| {
                (0..ctx_dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        fl(z * CONTEXT_INIT_STD)
                    })
                    .collect()
            })
            .collect()
    };

    let mut id_rng = stream_rng(seed, STREAM_INIT_ID, 0);
    let id_prompts = class_names
        .iter()
        .map(|name| {
            Ok(IdPrompt {
                context: draw(&mut id_rng),
                class_token: backend.token_embedding(name)?,
                class_name: name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ood_rng = stream_rng(seed, STREAM_INIT_OOD, 0);
    let ood_prompts = (0..num_ood)
        .map(|_| OodPrompt {
            context: draw(&mut ood_rng),
        })
        .collect();

    Ok(PromptSet {
        id_prompts,
        ood_prompts,
        token_len,
        ctx_dim,
    })
}

/// ID prompt features, then OOD prompt features.
pub type PromptFeatures<T> = (Vec<Embedding<T>>, Vec<Embedding<T>>);

/// One encoded prompt with its gradient handle.
pub(crate) type EncodedPrompt<'a, T> = (Embedding<T>, Box<dyn TextVjp<T> + 'a>);

/// Encode every prompt through the frozen text path.
pub fn prompt_features<T: Float>(
    ps: &PromptSet<T>,
    backend: &dyn Backend<T>,
) -> Result<PromptFeatures<T>> {
    let id_feats = (0..ps.num_classes())
        .map(|k| backend.encode_text(&ps.id_token_sequence(k)))
        .collect::<Result<Vec<_>>>()?;
    let ood_feats = (0..ps.num_ood())
        .map(|c| backend.encode_text(&ps.ood_token_sequence(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok((id_feats, ood_feats))
}

/// ID-prompt and OOD-prompt encodings with gradient handles.
pub(crate) type EncodedPromptSet<'a, T> = (Vec<EncodedPrompt<'a, T>>, Vec<EncodedPrompt<'a, T>>);

/// Prompt features plus VJP handles, for training.
pub(crate) fn prompt_features_vjp<'a, T: Float>(
    ps: &PromptSet<T>,
    backend: &'a dyn Backend<T>,
) -> Result<EncodedPromptSet<'a, T>> {
    if !backend.differentiable_text() {
        return Err(Error::GradientUnsupported);
    }
    let id = (0..ps.num_classes())
        .map(|k| backend.encode_text_vjp(&ps.id_token_sequence(k)))
        .collect::<Result<Vec<_>>>()?;
    let ood = (0..ps.num_ood())
        .map(|c| backend.encode_text_vjp(&ps.ood_token_sequence(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok((id, ood))
}

/// Per-step loss record kept in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_in: Option<f64>,
    pub loss_out: Option<f64>,
    pub loss_div: Option<f64>,
    pub total: f64,
}

/// Training hyperparameters; the optimizer is decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub out_loss_form: OutLossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.005,
            batch_size: 1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            out_loss_form: OutLossForm::RatioB,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::toy_backend;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let backend = toy_backend::<f64>(7, 16);
        let a = init_prompts(&names(2), 3, 16, 0, &backend).unwrap();
        let b = init_prompts(&names(2), 3, 16, 0, &backend).unwrap();
        let c = init_prompts(&names(2), 3, 16, 1, &backend).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.id_prompts[0].context, c.id_prompts[0].context);
        assert_eq!(a.id_prompts.len(), 2);
        assert_eq!(a.ood_prompts.len(), 3);
    }

    #[test]
    fn zero_ood_prompts_is_valid() {
        let backend = toy_backend::<f64>(7, 16);
        let ps = init_prompts(&names(2), 0, 4, 0, &backend).unwrap();
        assert_eq!(ps.num_ood(), 0);
        let (id_feats, ood_feats) = prompt_features(&ps, &backend).unwrap();
        assert_eq!(id_feats.len(), 2);
        assert!(ood_feats.is_empty());
    }

    #[test]
    fn features_are_unit_norm_and_identical_for_identical_contexts() {
        let backend = toy_backend::<f64>(7, 16);
        let mut ps = init_prompts(&names(2), 2, 4, 0, &backend).unwrap();
        ps.ood_prompts[1] = ps.ood_prompts[0].clone();
        let (id_feats, ood_feats) = prompt_features(&ps, &backend).unwrap();
        for f in id_feats.iter().chain(&ood_feats) {
            let norm: f64 = f.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert_eq!(ood_feats[0], ood_feats[1]);
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let backend = toy_backend::<f64>(7, 16);
        let ps = init_prompts(&names(3), 2, 4, 5, &backend).unwrap();
        let flat = ps.pack_context();
        assert_eq!(flat.len(), ps.param_count());
        let mut other = init_prompts(&names(3), 2, 4, 6, &backend).unwrap();
        other.unpack_context(&flat);
        assert_eq!(other.pack_context(), flat);
    }

    #[test]
    fn class_token_is_position_l() {
        let backend = toy_backend::<f64>(7, 16);
        let ps = init_prompts(&names(1), 0, 4, 0, &backend).unwrap();
        let seq = ps.id_token_sequence(0);
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.class_slot, Some(4));
        assert_eq!(seq.entries[4], backend.token_embedding("class0").unwrap());
    }
}
