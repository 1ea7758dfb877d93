//! Score functions, threshold calibration, and ID classification.
//!
//! The prompt-ratio score compares summed exponentiated ID similarities
//! against the total over ID and OOD prompts. Probability-space scores
//! saturate to 1.0 in floating point at small temperatures, so each score has
//! a log-odds companion that is order-equivalent and never saturates; ranking
//! (AUROC, FPR sweeps) uses the log-odds forms.

use rand::Rng;

use crate::embed::{log_sum_exp, SimilarityRow};
use crate::rng::stream_rng;
use crate::{fl, Error, Float, Result};

const STREAM_SCENARIO: u64 = 0x40;

/// Threshold detector: scores at or above gamma are accepted as ID.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector<T: Float> {
    pub gamma: T,
    pub tau: T,
}

/// Binary detection outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    InDistribution,
    OutOfDistribution,
}

/// Per-sample similarities, derived scores, and the predicted class.
#[derive(Debug, Clone)]
pub struct ScoreRecord<T: Float> {
    pub sample_id: String,
    pub sim_row: SimilarityRow<T>,
    pub score_idlike: T,
    pub score_idlike_logit: T,
    pub score_mcm: T,
    pub score_mcm_logit: T,
    pub score_msp: T,
    pub predicted_class: usize,
}

/// Prompt-ratio score: sum_k e^{s_in_k/tau} / (sum_k e^{s_in_k/tau} + sum_c e^{s_out_c/tau}).
///
/// Mathematically strictly inside (0, 1); at extreme temperature ratios the
/// f64 result rounds to 1.0, which is why ranking uses
/// [`score_idlike_logit`].
pub fn score_idlike<T: Float>(row: &SimilarityRow<T>, tau: T) -> Result<T> {
    if row.num_ood() == 0 {
        return Err(Error::NoOodPrompts);
    }
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let id: Vec<T> = row.id_sims().iter().map(|&s| s / tau).collect();
    let all: Vec<T> = id
        .iter()
        .cloned()
        .chain(row.ood_sims().iter().map(|&s| s / tau))
        .collect();
    Ok((log_sum_exp(&id)? - log_sum_exp(&all)?).exp())
}

/// Log-odds of the prompt-ratio score: LSE(id/tau) - LSE(ood/tau).
///
/// Strictly increasing in the score, never saturates, safe for ranking.
pub fn score_idlike_logit<T: Float>(row: &SimilarityRow<T>, tau: T) -> Result<T> {
    if row.num_ood() == 0 {
        return Err(Error::NoOodPrompts);
    }
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let id: Vec<T> = row.id_sims().iter().map(|&s| s / tau).collect();
    let ood: Vec<T> = row.ood_sims().iter().map(|&s| s / tau).collect();
    Ok(log_sum_exp(&id)? - log_sum_exp(&ood)?)
}

/// Maximum softmax over the ID similarities at temperature tau; OOD
/// similarities are ignored.
pub fn score_mcm<T: Float>(row: &SimilarityRow<T>, tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let scaled: Vec<T> = row.id_sims().iter().map(|&s| s / tau).collect();
    let lse = log_sum_exp(&scaled)?;
    let max = scaled.iter().cloned().fold(T::neg_infinity(), T::max);
    Ok((max - lse).exp())
}

/// Log-odds companion of [`score_mcm`]: s_max/tau - LSE(others/tau).
///
/// Positive infinity when K = 1 (the probability is exactly 1).
pub fn score_mcm_logit<T: Float>(row: &SimilarityRow<T>, tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let scaled: Vec<T> = row.id_sims().iter().map(|&s| s / tau).collect();
    let arg_max = classify(row);
    let others: Vec<T> = scaled
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != arg_max)
        .map(|(_, &x)| x)
        .collect();
    if others.is_empty() {
        return Ok(T::infinity());
    }
    Ok(scaled[arg_max] - log_sum_exp(&others)?)
}

/// Maximum softmax probability of a raw logit row at unit temperature.
pub fn score_msp<T: Float>(logit_row: &[T]) -> Result<T> {
    let lse = log_sum_exp(logit_row)?;
    let max = logit_row.iter().cloned().fold(T::neg_infinity(), T::max);
    Ok((max - lse).exp())
}

/// Predicted class: argmax over ID similarities only; ties take the lowest
/// index.
pub fn classify<T: Float>(row: &SimilarityRow<T>) -> usize {
    let mut best = 0;
    for (k, &s) in row.id_sims().iter().enumerate() {
        if s > row.id_sims()[best] {
            best = k;
        }
    }
    best
}

/// Largest gamma accepting at least `target_tpr` of the calibration scores.
///
/// Rule: sort ascending and take the score at index floor((1 - tpr) * n),
/// with a 1e-9 rounding guard so exact products do not fall to the wrong
/// side of an integer.
pub fn calibrate_gamma<T: Float>(id_scores: &[T], target_tpr: f64) -> Result<T> {
    if id_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidTargetTpr(target_tpr));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let n = sorted.len();
    let index = ((1.0 - target_tpr) * n as f64 + 1e-9).floor() as usize;
    Ok(sorted[index.min(n - 1)])
}

/// Apply the threshold rule: ID iff score >= gamma.
pub fn detect<T: Float>(score: T, detector: &Detector<T>) -> Verdict {
    if score >= detector.gamma {
        Verdict::InDistribution
    } else {
        Verdict::OutOfDistribution
    }
}

/// Build the full per-sample record.
///
/// With no OOD prompts (zero-shot scoring) the prompt-ratio score takes its
/// C -> 0 limit of exactly 1, and its log-odds form is positive infinity.
pub fn score_sample<T: Float>(
    sample_id: impl Into<String>,
    row: SimilarityRow<T>,
    tau: T,
) -> Result<ScoreRecord<T>> {
    let (idlike, idlike_logit) = if row.num_ood() == 0 {
        (T::one(), T::infinity())
    } else {
        (score_idlike(&row, tau)?, score_idlike_logit(&row, tau)?)
    };
    Ok(ScoreRecord {
        sample_id: sample_id.into(),
        score_idlike: idlike,
        score_idlike_logit: idlike_logit,
        score_mcm: score_mcm(&row, tau)?,
        score_mcm_logit: score_mcm_logit(&row, tau)?,
        score_msp: score_msp(row.id_sims())?,
        predicted_class: classify(&row),
        sim_row: row,
    })
}

/// Construct the paired id-like scenario: an ID row and an OOD row sharing
/// identical ID similarities, with the OOD row's outlier similarities lifted
/// by `delta` elementwise.
///
/// Remaining values are seeded uniform in [-0.5, 0.5]; `delta` must stay in
/// (0, 0.5] so all similarities remain within [-1, 1].
pub fn synthetic_idlike_scenario<T: Float>(
    num_id: usize,
    num_ood: usize,
    seed: u64,
    delta: f64,
) -> Result<(SimilarityRow<T>, SimilarityRow<T>)> {
    if num_id < 2 || num_ood < 1 {
        return Err(Error::EmptyInput);
    }
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "delta must be in (0, 0.5], got {delta}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_SCENARIO, 0);
    let id_sims: Vec<T> = (0..num_id).map(|_| fl(rng.gen_range(-0.5..0.5))).collect();
    let ood_low: Vec<T> = (0..num_ood).map(|_| fl(rng.gen_range(-0.5..0.5))).collect();
    let ood_high: Vec<T> = ood_low.iter().map(|&s| s + fl(delta)).collect();
    let row_id = SimilarityRow::new(id_sims.clone(), ood_low)?;
    let row_ood = SimilarityRow::new(id_sims, ood_high)?;
    Ok((row_id, row_ood))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &[f64], ood: &[f64]) -> SimilarityRow<f64> {
        SimilarityRow::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn idlike_symmetry_point_is_half() {
        let r = row(&[0.3, -0.2], &[0.3, -0.2]);
        assert!((score_idlike(&r, 0.7).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idlike_limit_toward_one() {
        let r = row(&[1.0, 1.0], &[-1.0, -1.0]);
        assert!(score_idlike(&r, 0.01).unwrap() >= 1.0 - 1e-80);
        assert!(score_idlike_logit(&r, 0.01).unwrap() > 100.0);
    }

    #[test]
    fn idlike_matches_extended_precision_reference() {
        // K=2, C=3, sims [0.4, 0.1 | 0.3, 0.2, 0.0], tau 0.5 at 60 digits
        let r = row(&[0.4, 0.1], &[0.3, 0.2, 0.0]);
        let got = score_idlike(&r, 0.5).unwrap();
        assert!((got - 0.4441429961068042).abs() < 1e-15, "{got}");
    }

    #[test]
    fn idlike_requires_ood_prompts() {
        let r = row(&[0.4], &[]);
        assert!(matches!(score_idlike(&r, 1.0), Err(Error::NoOodPrompts)));
    }

    #[test]
    fn idlike_logit_orders_like_score() {
        let a = row(&[0.4, 0.1], &[0.0, -0.2]);
        let b = row(&[0.4, 0.1], &[0.2, 0.1]);
        let tau = 0.5;
        assert!(score_idlike(&a, tau).unwrap() > score_idlike(&b, tau).unwrap());
        assert!(score_idlike_logit(&a, tau).unwrap() > score_idlike_logit(&b, tau).unwrap());
    }

    #[test]
    fn mcm_basics() {
        let r = row(&[0.4, 0.4], &[]);
        assert!((score_mcm(&r, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let dominant = row(&[0.9, -0.9], &[]);
        assert!(score_mcm(&dominant, 0.01).unwrap() >= 1.0 - 1e-40);
        // ood sims never matter
        let with_ood = row(&[0.4, 0.4], &[0.9, -0.3]);
        assert_eq!(
            score_mcm(&r, 1.0).unwrap(),
            score_mcm(&with_ood, 1.0).unwrap()
        );
    }

    #[test]
    fn mcm_matches_softmax_oracle() {
        let sims = [0.31, -0.12, 0.07];
        let r = row(&sims, &[]);
        let probs = crate::embed::softmax_probs(&sims, 1.0).unwrap();
        let oracle = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((score_mcm(&r, 1.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn msp_matches_softmax_oracle_at_unit_temperature() {
        let logits = [1.3, -0.4, 0.9];
        let probs = crate::embed::softmax_probs(&logits, 1.0).unwrap();
        let oracle = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((score_msp(&logits).unwrap() - oracle).abs() < 1e-12);
        let even = [0.2_f64, 0.2];
        assert!((score_msp(&even).unwrap() - 0.5).abs() < 1e-12);
        let dominant = [90.0_f64, 0.0];
        assert!(score_msp(&dominant).unwrap() >= 1.0 - 1e-30);
    }

    #[test]
    fn classify_argmax_and_ties() {
        assert_eq!(classify(&row(&[0.1, 0.9], &[])), 1);
        assert_eq!(classify(&row(&[0.1, 0.9], &[0.99, 0.95])), 1);
        assert_eq!(classify(&row(&[0.5, 0.5], &[])), 0);
    }

    #[test]
    fn calibrate_gamma_examples() {
        // all equal
        assert_eq!(calibrate_gamma(&[0.7_f64, 0.7, 0.7], 0.95).unwrap(), 0.7);
        // single score
        assert_eq!(calibrate_gamma(&[0.42_f64], 0.95).unwrap(), 0.42);
        // 0.01..=1.00 step 0.01: gamma leaves 95 of 100 at or above
        let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let gamma = calibrate_gamma(&scores, 0.95).unwrap();
        assert!((gamma - 0.06).abs() < 1e-12);
        let kept = scores.iter().filter(|&&s| s >= gamma).count();
        assert!(kept >= 95);
    }

    #[test]
    fn calibrate_gamma_validation() {
        assert!(matches!(
            calibrate_gamma::<f64>(&[], 0.95),
            Err(Error::EmptyScores)
        ));
        assert!(matches!(
            calibrate_gamma(&[0.5_f64], 0.0),
            Err(Error::InvalidTargetTpr(_))
        ));
    }

    #[test]
    fn calibrated_gamma_is_the_largest_feasible_candidate() {
        let mut rng = stream_rng(55, 0, 0);
        for case in 0..200 {
            let n = rng.gen_range(1..=40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64 / 12.0).collect();
            let tpr = [0.8, 0.9, 0.95, 1.0][case % 4];
            let gamma = calibrate_gamma(&scores, tpr).unwrap();
            let kept = scores.iter().filter(|&&s| s >= gamma).count() as f64;
            assert!(
                kept / (n as f64) >= tpr - 1e-9,
                "case {case}: achieved tpr {} below target {tpr}",
                kept / n as f64
            );
            // every strictly larger candidate threshold must violate the target
            for &cand in scores.iter().filter(|&&c| c > gamma) {
                let kept = scores.iter().filter(|&&s| s >= cand).count() as f64;
                assert!(
                    kept / (n as f64) < tpr - 1e-9,
                    "case {case}: candidate {cand} above gamma {gamma} still meets tpr"
                );
            }
        }
    }

    #[test]
    fn detect_threshold_is_inclusive() {
        let d = Detector { gamma: 0.4_f64, tau: 1.0 };
        assert_eq!(detect(0.4, &d), Verdict::InDistribution);
        assert_eq!(detect(0.4 - 1e-12, &d), Verdict::OutOfDistribution);
        let everything = Detector { gamma: f64::NEG_INFINITY, tau: 1.0 };
        assert_eq!(detect(-1e300, &everything), Verdict::InDistribution);
    }

    #[test]
    fn scenario_shares_id_sims_and_lifts_ood() {
        let (a, b) = synthetic_idlike_scenario::<f64>(3, 2, 9, 0.2).unwrap();
        assert_eq!(a.id_sims(), b.id_sims());
        for (lo, hi) in a.ood_sims().iter().zip(b.ood_sims()) {
            assert!((hi - lo - 0.2).abs() < 1e-12);
        }
        // identical id sims make the mcm gap exactly zero
        assert_eq!(
            score_mcm(&a, 0.1).unwrap(),
            score_mcm(&b, 0.1).unwrap()
        );
    }

    #[test]
    fn scenario_numeric_gap_matches_direct_formula() {
        let tau = 1.0;
        let (a, b) = synthetic_idlike_scenario::<f64>(2, 1, 4, 0.2).unwrap();
        // direct evaluation without log-sum-exp
        let direct = |r: &SimilarityRow<f64>| {
            let num: f64 = r.id_sims().iter().map(|s| (s / tau).exp()).sum();
            let den: f64 = num + r.ood_sims().iter().map(|s| (s / tau).exp()).sum::<f64>();
            num / den
        };
        let gap = score_idlike(&a, tau).unwrap() - score_idlike(&b, tau).unwrap();
        let oracle_gap = direct(&a) - direct(&b);
        assert!(gap > 0.0);
        assert!((gap - oracle_gap).abs() < 1e-12);
    }

    #[test]
    fn score_sample_zero_shot_limit() {
        let r = row(&[0.4, 0.2], &[]);
        let rec = score_sample("s", r, 0.5).unwrap();
        assert_eq!(rec.score_idlike, 1.0);
        assert!(rec.score_idlike_logit.is_infinite());
        assert_eq!(rec.predicted_class, 0);
    }

    #[test]
    fn idlike_monotonicity_by_finite_differences() {
        let mut rng = stream_rng(12, 0, 0);
        let tau = 0.3;
        let h = 1e-6;
        for _ in 0..100 {
            let k = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=4);
            let id: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let ood: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let base = score_idlike(&row(&id, &ood), tau).unwrap();
            for i in 0..k {
                let mut bumped = id.clone();
                bumped[i] += h;
                let s = score_idlike(&row(&bumped, &ood), tau).unwrap();
                assert!(s > base, "not increasing in id sim {i}");
            }
            for i in 0..c {
                let mut bumped = ood.clone();
                bumped[i] += h;
                let s = score_idlike(&row(&id, &bumped), tau).unwrap();
                assert!(s < base, "not decreasing in ood sim {i}");
            }
        }
    }

    #[test]
    fn idlike_shift_invariance() {
        let id = [0.3, -0.1];
        let ood = [0.2, 0.0, -0.4];
        let tau = 0.25;
        let base = score_idlike(&row(&id, &ood), tau).unwrap();
        for shift in [-0.4, 0.15, 0.5] {
            let id_s: Vec<f64> = id.iter().map(|s| s + shift).collect();
            let ood_s: Vec<f64> = ood.iter().map(|s| s + shift).collect();
            let shifted = score_idlike(&row(&id_s, &ood_s), tau).unwrap();
            assert!((shifted - base).abs() < 1e-9);
        }
    }

    #[test]
    fn classify_ignores_ood_prompts_entirely() {
        let mut rng = stream_rng(21, 0, 0);
        for _ in 0..50 {
            let k = rng.gen_range(1..=5);
            let id: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bare = classify(&row(&id, &[]));
            for c in 0..4 {
                let ood: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                assert_eq!(bare, classify(&row(&id, &ood)));
            }
        }
    }
}
