//! Evaluation metrics: FPR at fixed TPR, rank-based AUROC, ID accuracy.
//!
//! AUROC uses the rank-statistic form (pairs won plus half the ties over
//! all pairs) rather than a binned ROC curve, so it is exact and matches the
//! O(n_id * n_ood) pair-counting oracle bit for bit.

use serde::{Deserialize, Serialize};

use crate::detect::{calibrate_gamma, ScoreRecord};
use crate::{Error, Float, Result};

/// One evaluation outcome. ID is the positive class throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fpr_at_95: f64,
    pub auroc: f64,
    pub id_acc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Fraction of OOD scores at or above the gamma that accepts `target_tpr`
/// of the ID scores.
pub fn fpr_at_tpr<T: Float>(id_scores: &[T], ood_scores: &[T], target_tpr: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let gamma = calibrate_gamma(id_scores, target_tpr)?;
    let false_positives = ood_scores.iter().filter(|&&s| s >= gamma).count();
    Ok(false_positives as f64 / ood_scores.len() as f64)
}

/// Rank-based AUROC: P(id score > ood score) + 0.5 P(tie).
pub fn auroc<T: Float>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    // merge, assign average ranks within tie groups, sum the id ranks
    let mut combined: Vec<(T, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    let n = combined.len();
    let mut rank_sum_id = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && combined[j].0 == combined[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j averaged over the tie group
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &combined[i..j] {
            if item.1 {
                rank_sum_id += avg_rank;
            }
        }
        i = j;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let u = rank_sum_id - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Fraction of records whose predicted class matches the label.
pub fn id_accuracy<T: Float>(records: &[ScoreRecord<T>], labels: &[usize]) -> Result<f64> {
    if records.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: labels.len(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyScores);
    }
    let correct = records
        .iter()
        .zip(labels)
        .filter(|(r, &y)| r.predicted_class == y)
        .count();
    Ok(correct as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::SimilarityRow;
    use rand::Rng;

    #[test]
    fn fpr_perfect_separation_is_zero() {
        let id = vec![0.9_f64; 10];
        let ood = vec![0.1_f64; 10];
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn fpr_of_identical_distributions_equals_achieved_tpr() {
        let scores: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let fpr = fpr_at_tpr(&scores, &scores, 0.95).unwrap();
        let gamma = calibrate_gamma(&scores, 0.95).unwrap();
        let tpr = scores.iter().filter(|&&s| s >= gamma).count() as f64 / 40.0;
        assert_eq!(fpr, tpr);
        assert!(tpr >= 0.95);
    }

    /// Exhaustive sweep over every candidate threshold.
    fn fpr_oracle(id: &[f64], ood: &[f64], target_tpr: f64) -> f64 {
        let n = id.len() as f64;
        let mut best_gamma = f64::NEG_INFINITY;
        let mut candidates = id.to_vec();
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &cand in &candidates {
            let kept = id.iter().filter(|&&s| s >= cand).count() as f64;
            if kept / n >= target_tpr - 1e-9 && cand > best_gamma {
                best_gamma = cand;
            }
        }
        ood.iter().filter(|&&s| s >= best_gamma).count() as f64 / ood.len() as f64
    }

    #[test]
    fn fpr_matches_exhaustive_oracle_on_shifted_grid() {
        let id: Vec<f64> = (0..20).map(|i| 0.05 * i as f64).collect();
        let ood: Vec<f64> = id.iter().map(|s| s - 0.05).collect();
        let got = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        assert_eq!(got, fpr_oracle(&id, &ood, 0.95));
    }

    #[test]
    fn fpr_matches_exhaustive_oracle_on_200_random_instances() {
        let mut rng = crate::rng::stream_rng(31, 0, 0);
        for case in 0..200 {
            let n_id = rng.gen_range(1..=50);
            let n_ood = rng.gen_range(1..=50);
            // coarse grid to generate plenty of ties
            let id: Vec<f64> = (0..n_id).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
            let ood: Vec<f64> = (0..n_ood).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
            let tpr = [0.8, 0.9, 0.95, 0.99][case % 4];
            assert_eq!(
                fpr_at_tpr(&id, &ood, tpr).unwrap(),
                fpr_oracle(&id, &ood, tpr),
                "case {case}"
            );
        }
    }

    /// O(n_id * n_ood) pair-counting oracle.
    fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0f64;
        for &a in id {
            for &b in ood {
                if a > b {
                    wins += 1.0;
                } else if a == b {
                    wins += 0.5;
                }
            }
        }
        wins / (id.len() as f64 * ood.len() as f64)
    }

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[0.9_f64, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        let same = [0.3_f64, 0.5, 0.7];
        assert_eq!(auroc(&same, &same).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9_f64, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
    }

    #[test]
    fn auroc_matches_pair_counting_oracle_on_200_random_instances() {
        let mut rng = crate::rng::stream_rng(32, 0, 0);
        for case in 0..200 {
            let n_id = rng.gen_range(1..=50);
            let n_ood = rng.gen_range(1..=50);
            let id: Vec<f64> = (0..n_id).map(|_| rng.gen_range(0..15) as f64 / 15.0).collect();
            let ood: Vec<f64> = (0..n_ood).map(|_| rng.gen_range(0..15) as f64 / 15.0).collect();
            assert_eq!(
                auroc(&id, &ood).unwrap(),
                auroc_oracle(&id, &ood),
                "case {case}"
            );
        }
    }

    #[test]
    fn auroc_rank_symmetry() {
        let mut rng = crate::rng::stream_rng(33, 0, 0);
        for _ in 0..50 {
            let id: Vec<f64> = (0..rng.gen_range(1..=20))
                .map(|_| rng.gen_range(0..10) as f64)
                .collect();
            let ood: Vec<f64> = (0..rng.gen_range(1..=20))
                .map(|_| rng.gen_range(0..10) as f64)
                .collect();
            let forward = auroc(&id, &ood).unwrap();
            let backward = auroc(&ood, &id).unwrap();
            assert_eq!(forward + backward, 1.0);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = crate::rng::stream_rng(34, 0, 0);
        let id: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ood: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = auroc(&id, &ood).unwrap();
        let squash = |v: &[f64]| v.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect::<Vec<_>>();
        assert_eq!(base, auroc(&squash(&id), &squash(&ood)).unwrap());
    }

    fn record(pred_sims: &[f64]) -> ScoreRecord<f64> {
        let row = SimilarityRow::new(pred_sims.to_vec(), vec![0.0]).unwrap();
        crate::detect::score_sample("x", row, 1.0).unwrap()
    }

    #[test]
    fn id_accuracy_counts() {
        let records = vec![
            record(&[0.9, 0.1]), // pred 0
            record(&[0.1, 0.9]), // pred 1
            record(&[0.8, 0.2]), // pred 0
        ];
        assert_eq!(id_accuracy(&records, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(id_accuracy(&records, &[1, 0, 1]).unwrap(), 0.0);
        assert!((id_accuracy(&records, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            id_accuracy(&records, &[0]),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
