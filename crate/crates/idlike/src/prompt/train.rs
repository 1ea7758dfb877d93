//! The prompt-tuning loop.
//!
//! Each epoch deterministically reshuffles d_in and d_out (streams keyed by
//! `(seed, epoch)`), interleaves them one ID item then one OOD item, and takes
//! one optimizer step per batch. The diversity term is applied on every step.
//! Backend parameters are never touched; only prompt context vectors move.

use rand::seq::SliceRandom;

use crate::embed::{Embedding, SimilarityRow};
use crate::encoder::Backend;
use crate::miner::MinedDatasets;
use crate::prompt::losses::{
    loss_div_grad, loss_in_grad, loss_out_grad, LossWeights, OutLossForm,
};
use crate::prompt::optim::AdamW;
use crate::prompt::{prompt_features_vjp, PromptSet, StepRecord, TrainConfig};
use crate::rng::stream_rng;
use crate::{fl, Error, Float, Result};

const STREAM_SHUFFLE_IN: u64 = 0x30;
const STREAM_SHUFFLE_OUT: u64 = 0x31;

/// One optimizer step's worth of training items, by reference.
#[derive(Debug, Default)]
pub struct StepBatch<'a, T: Float> {
    pub id_items: Vec<(&'a Embedding<T>, usize)>,
    pub ood_items: Vec<&'a Embedding<T>>,
}

/// Loss values for one step; absent terms were not active in the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_in: Option<f64>,
    pub loss_out: Option<f64>,
    pub loss_div: Option<f64>,
    pub total: f64,
}

fn sim_row<T: Float>(
    id_feats: &[Embedding<T>],
    ood_feats: &[Embedding<T>],
    image: &Embedding<T>,
) -> Result<SimilarityRow<T>> {
    let id = id_feats
        .iter()
        .map(|f| f.dot(image))
        .collect::<Result<Vec<T>>>()?;
    let ood = ood_feats
        .iter()
        .map(|f| f.dot(image))
        .collect::<Result<Vec<T>>>()?;
    SimilarityRow::new(id, ood)
}

fn axpy<T: Float>(acc: &mut [T], coeff: T, v: &[T]) {
    for (slot, &x) in acc.iter_mut().zip(v) {
        *slot = *slot + coeff * x;
    }
}

/// Total loss over one batch plus its gradient over all context vectors.
///
/// This is the exact code path training takes, exposed so gradient checks
/// exercise the real thing. The gradient is laid out like
/// [`PromptSet::pack_context`]. ID items contribute the in-distribution term,
/// OOD items the outlier term (weighted by lambda_out), and the diversity
/// term is added whenever lambda_div is nonzero.
pub fn loss_with_gradients<T: Float>(
    ps: &PromptSet<T>,
    backend: &dyn Backend<T>,
    batch: &StepBatch<'_, T>,
    weights: &LossWeights<T>,
    form: OutLossForm,
) -> Result<(StepLosses, Vec<T>)> {
    if weights.lambda_div > T::zero() && ps.num_ood() < 2 {
        return Err(Error::TooFewPrompts(ps.num_ood()));
    }
    if !batch.ood_items.is_empty() && weights.lambda_out > T::zero() && ps.num_ood() == 0 {
        return Err(Error::NoOodPrompts);
    }

    let (id_enc, ood_enc) = prompt_features_vjp(ps, backend)?;
    let id_feats: Vec<Embedding<T>> = id_enc.iter().map(|(e, _)| e.clone()).collect();
    let ood_feats: Vec<Embedding<T>> = ood_enc.iter().map(|(e, _)| e.clone()).collect();
    let dim = backend.dim();

    let mut g_id = vec![vec![T::zero(); dim]; id_feats.len()];
    let mut g_ood = vec![vec![T::zero(); dim]; ood_feats.len()];

    let mut mean_in: Option<T> = None;
    if !batch.id_items.is_empty() {
        let scale = T::one() / fl(batch.id_items.len() as f64);
        let mut acc = T::zero();
        for &(image, label) in &batch.id_items {
            let row = sim_row(&id_feats, &ood_feats, image)?;
            let (value, d_id, d_ood) = loss_in_grad(&row, label, weights.tau)?;
            acc = acc + value;
            for (k, &d) in d_id.iter().enumerate() {
                axpy(&mut g_id[k], d * scale, image.as_slice());
            }
            for (c, &d) in d_ood.iter().enumerate() {
                axpy(&mut g_ood[c], d * scale, image.as_slice());
            }
        }
        mean_in = Some(acc * scale);
    }

    let mut mean_out: Option<T> = None;
    if !batch.ood_items.is_empty() && ps.num_ood() > 0 {
        let scale = T::one() / fl(batch.ood_items.len() as f64);
        let weighted = weights.lambda_out * scale;
        let mut acc = T::zero();
        for &image in &batch.ood_items {
            let row = sim_row(&id_feats, &ood_feats, image)?;
            let (value, d_id, d_ood) = loss_out_grad(&row, weights.tau, form)?;
            acc = acc + value;
            for (k, &d) in d_id.iter().enumerate() {
                axpy(&mut g_id[k], d * weighted, image.as_slice());
            }
            for (c, &d) in d_ood.iter().enumerate() {
                axpy(&mut g_ood[c], d * weighted, image.as_slice());
            }
        }
        mean_out = Some(acc * scale);
    }

    let mut div_value: Option<T> = None;
    if weights.lambda_div > T::zero() {
        let (value, grads) = loss_div_grad(&ood_feats)?;
        div_value = Some(value);
        for (c, g) in grads.iter().enumerate() {
            axpy(&mut g_ood[c], weights.lambda_div, g);
        }
    }

    // pull feature gradients back through the frozen text path
    let per_prompt = ps.token_len * ps.ctx_dim;
    let mut flat = vec![T::zero(); ps.param_count()];
    for (k, (_, vjp)) in id_enc.iter().enumerate() {
        if g_id[k].iter().all(|&x| x == T::zero()) {
            continue;
        }
        let token_grads = vjp.token_grads(&g_id[k]);
        let base = k * per_prompt;
        // positions 0..L are context; position L is the frozen class token
        for (pos, grad) in token_grads.iter().take(ps.token_len).enumerate() {
            let offset = base + pos * ps.ctx_dim;
            axpy(&mut flat[offset..offset + ps.ctx_dim], T::one(), grad);
        }
    }
    let ood_base = ps.num_classes() * per_prompt;
    for (c, (_, vjp)) in ood_enc.iter().enumerate() {
        if g_ood[c].iter().all(|&x| x == T::zero()) {
            continue;
        }
        let token_grads = vjp.token_grads(&g_ood[c]);
        let base = ood_base + c * per_prompt;
        for (pos, grad) in token_grads.iter().take(ps.token_len).enumerate() {
            let offset = base + pos * ps.ctx_dim;
            axpy(&mut flat[offset..offset + ps.ctx_dim], T::one(), grad);
        }
    }

    let to_f64 = |x: Option<T>| x.map(|v| v.to_f64().unwrap_or(f64::NAN));
    let losses = StepLosses {
        loss_in: to_f64(mean_in),
        loss_out: to_f64(mean_out),
        loss_div: to_f64(div_value),
        total: {
            let lin = mean_in.unwrap_or_else(T::zero);
            let lout = mean_out.unwrap_or_else(T::zero);
            let ldiv = div_value.unwrap_or_else(T::zero);
            (lin + weights.lambda_out * lout + weights.lambda_div * ldiv)
                .to_f64()
                .unwrap_or(f64::NAN)
        },
    };
    Ok((losses, flat))
}

enum StreamItem {
    InDistribution(usize),
    Outlier(usize),
}

/// Tune prompt context vectors on the mined datasets.
///
/// Returns the updated prompts and the per-step loss history. Aborts with
/// [`Error::DivergenceDetected`] (carrying the history so far) if any loss
/// goes non-finite.
pub fn train<T: Float>(
    mined: &MinedDatasets<T>,
    prompts: &PromptSet<T>,
    backend: &dyn Backend<T>,
    config: &TrainConfig,
    weights: &LossWeights<T>,
) -> Result<(PromptSet<T>, Vec<StepRecord>)> {
    config.validate()?;
    if !backend.differentiable_text() {
        return Err(Error::GradientUnsupported);
    }
    if mined.d_in.is_empty() && mined.d_out.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.lambda_div > T::zero() && prompts.num_ood() < 2 {
        return Err(Error::TooFewPrompts(prompts.num_ood()));
    }
    let before = backend.param_checksum();

    let mut ps = prompts.clone();
    let mut params = ps.pack_context();
    let mut optimizer = AdamW::new(
        params.len(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
        config.weight_decay,
    );
    let mut history: Vec<StepRecord> = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut in_order: Vec<usize> = (0..mined.d_in.len()).collect();
        in_order.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE_IN, epoch as u64));
        let mut out_order: Vec<usize> = (0..mined.d_out.len()).collect();
        out_order.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE_OUT, epoch as u64));

        let mut stream = Vec::with_capacity(in_order.len() + out_order.len());
        let longest = in_order.len().max(out_order.len());
        for i in 0..longest {
            if i < in_order.len() {
                stream.push(StreamItem::InDistribution(in_order[i]));
            }
            if i < out_order.len() {
                stream.push(StreamItem::Outlier(out_order[i]));
            }
        }

        for chunk in stream.chunks(config.batch_size) {
            let mut batch = StepBatch::default();
            for item in chunk {
                match *item {
                    StreamItem::InDistribution(i) => {
                        let ex = &mined.d_in[i];
                        batch.id_items.push((&ex.embedding, ex.label));
                    }
                    StreamItem::Outlier(i) => {
                        batch.ood_items.push(&mined.d_out[i].embedding);
                    }
                }
            }
            let (losses, grad) =
                loss_with_gradients(&ps, backend, &batch, weights, config.out_loss_form)?;
            let record = StepRecord {
                step,
                epoch,
                loss_in: losses.loss_in,
                loss_out: losses.loss_out,
                loss_div: losses.loss_div,
                total: losses.total,
            };
            if !record.total.is_finite() {
                history.push(record);
                return Err(Error::DivergenceDetected { step, history });
            }
            history.push(record);
            optimizer.step(&mut params, &grad);
            ps.unpack_context(&params);
            step += 1;
        }
    }

    debug_assert_eq!(backend.param_checksum(), before);
    Ok((ps, history))
}
