//! The three loss terms and their gradients with respect to similarities.
//!
//! All reductions go through [`log_sum_exp`]; the gradient routines return
//! exact analytic derivatives so training and the finite-difference checks
//! share one code path.

use serde::{Deserialize, Serialize};

use crate::embed::{log_sum_exp, Embedding, SimilarityRow};
use crate::{fl, Error, Float, Result};

/// Which form of the outlier loss to optimize.
///
/// `RatioA` pulls OOD-prompt similarities up toward outliers; `RatioB`
/// pushes ID-prompt similarities down on outliers. Both move the prompt-ratio
/// score the same direction; `RatioB` trains better and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutLossForm {
    RatioA,
    RatioB,
}

impl std::str::FromStr for OutLossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio_a" => Ok(Self::RatioA),
            "ratio_b" => Ok(Self::RatioB),
            other => Err(Error::InvalidConfig(format!(
                "out_loss_form must be ratio_a or ratio_b, got {other:?}"
            ))),
        }
    }
}

/// Loss-term weights and the shared temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T: Float> {
    pub lambda_out: T,
    pub lambda_div: T,
    pub tau: T,
}

impl<T: Float> LossWeights<T> {
    pub fn new(lambda_out: f64, lambda_div: f64, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::NonPositiveTemperature(tau));
        }
        if lambda_out < 0.0 || lambda_div < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(Self {
            lambda_out: fl(lambda_out),
            lambda_div: fl(lambda_div),
            tau: fl(tau),
        })
    }
}

impl<T: Float> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            lambda_out: fl(0.3),
            lambda_div: fl(0.2),
            tau: fl(0.01),
        }
    }
}

fn scaled_sims<T: Float>(row: &SimilarityRow<T>, tau: T) -> Result<(Vec<T>, Vec<T>)> {
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let id: Vec<T> = row.id_sims().iter().map(|&s| s / tau).collect();
    let ood: Vec<T> = row.ood_sims().iter().map(|&s| s / tau).collect();
    Ok((id, ood))
}

/// Cross-entropy of the true class against all K + C prompts.
pub fn loss_in<T: Float>(row: &SimilarityRow<T>, label: usize, tau: T) -> Result<T> {
    if label >= row.num_id() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: row.num_id(),
        });
    }
    let (id, ood) = scaled_sims(row, tau)?;
    let all: Vec<T> = id.iter().chain(ood.iter()).cloned().collect();
    Ok(log_sum_exp(&all)? - id[label])
}

/// [`loss_in`] plus its gradient with respect to each similarity.
pub fn loss_in_grad<T: Float>(
    row: &SimilarityRow<T>,
    label: usize,
    tau: T,
) -> Result<(T, Vec<T>, Vec<T>)> {
    if label >= row.num_id() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: row.num_id(),
        });
    }
    let (id, ood) = scaled_sims(row, tau)?;
    let all: Vec<T> = id.iter().chain(ood.iter()).cloned().collect();
    let lse_all = log_sum_exp(&all)?;
    let value = lse_all - id[label];

    // d/ds_k = (p_k - [k == label]) / tau, d/ds_c = p_c / tau
    let mut d_id: Vec<T> = id.iter().map(|&x| (x - lse_all).exp() / tau).collect();
    d_id[label] = d_id[label] - T::one() / tau;
    let d_ood: Vec<T> = ood.iter().map(|&x| (x - lse_all).exp() / tau).collect();
    Ok((value, d_id, d_ood))
}

/// Outlier loss in the requested form.
pub fn loss_out<T: Float>(row: &SimilarityRow<T>, tau: T, form: OutLossForm) -> Result<T> {
    if row.num_ood() == 0 {
        return Err(Error::NoOodPrompts);
    }
    let (id, ood) = scaled_sims(row, tau)?;
    let all: Vec<T> = id.iter().chain(ood.iter()).cloned().collect();
    let lse_all = log_sum_exp(&all)?;
    match form {
        OutLossForm::RatioA => Ok(lse_all - log_sum_exp(&ood)?),
        OutLossForm::RatioB => Ok(log_sum_exp(&id)? - lse_all),
    }
}

/// [`loss_out`] plus its gradient with respect to each similarity.
pub fn loss_out_grad<T: Float>(
    row: &SimilarityRow<T>,
    tau: T,
    form: OutLossForm,
) -> Result<(T, Vec<T>, Vec<T>)> {
    if row.num_ood() == 0 {
        return Err(Error::NoOodPrompts);
    }
    let (id, ood) = scaled_sims(row, tau)?;
    let all: Vec<T> = id.iter().chain(ood.iter()).cloned().collect();
    let lse_all = log_sum_exp(&all)?;
    let lse_id = log_sum_exp(&id)?;
    let lse_ood = log_sum_exp(&ood)?;

    match form {
        OutLossForm::RatioA => {
            let value = lse_all - lse_ood;
            let d_id: Vec<T> = id.iter().map(|&x| (x - lse_all).exp() / tau).collect();
            let d_ood: Vec<T> = ood
                .iter()
                .map(|&x| ((x - lse_all).exp() - (x - lse_ood).exp()) / tau)
                .collect();
            Ok((value, d_id, d_ood))
        }
        OutLossForm::RatioB => {
            let value = lse_id - lse_all;
            let d_id: Vec<T> = id
                .iter()
                .map(|&x| ((x - lse_id).exp() - (x - lse_all).exp()) / tau)
                .collect();
            let d_ood: Vec<T> = ood
                .iter()
                .map(|&x| -((x - lse_all).exp()) / tau)
                .collect();
            Ok((value, d_id, d_ood))
        }
    }
}

/// Mean pairwise cosine similarity among the OOD prompt features.
pub fn loss_div<T: Float>(ood_feats: &[Embedding<T>]) -> Result<T> {
    let c = ood_feats.len();
    if c < 2 {
        return Err(Error::TooFewPrompts(c));
    }
    let mut acc = T::zero();
    for i in 0..c {
        for j in i + 1..c {
            acc = acc + ood_feats[i].dot(&ood_feats[j])?;
        }
    }
    Ok(acc / fl((c * (c - 1) / 2) as f64))
}

/// [`loss_div`] plus its gradient with respect to each feature vector.
pub fn loss_div_grad<T: Float>(ood_feats: &[Embedding<T>]) -> Result<(T, Vec<Vec<T>>)> {
    let c = ood_feats.len();
    let value = loss_div(ood_feats)?;
    let scale = T::one() / fl((c * (c - 1) / 2) as f64);
    let dim = ood_feats[0].dim();
    let mut grads = vec![vec![T::zero(); dim]; c];
    for (i, grad) in grads.iter_mut().enumerate() {
        for (j, feat) in ood_feats.iter().enumerate() {
            if i == j {
                continue;
            }
            for (slot, &x) in grad.iter_mut().zip(feat.as_slice()) {
                *slot = *slot + x * scale;
            }
        }
    }
    Ok((value, grads))
}

/// Weighted sum of the three terms.
pub fn total_loss<T: Float>(l_in: T, l_out: T, l_div: T, w: &LossWeights<T>) -> T {
    l_in + w.lambda_out * l_out + w.lambda_div * l_div
}
