//! Unit-norm embeddings, cosine similarity, and temperature softmax.
//!
//! Every reduction over exponentials goes through max-shifted
//! [`log_sum_exp`]; raw exponentials overflow at the temperatures this
//! pipeline runs at (similarities near 1 with tau = 0.01).

use crate::{fl, Error, Float, Result};

/// Drift tolerance for cosine values before an input counts as non-normalized.
const COS_DRIFT: f64 = 1e-9;

/// Unit-norm d-dimensional vector produced by an encoder or [`normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Float> {
    values: Vec<T>,
}

impl<T: Float> Embedding<T> {
    /// Wrap an already-unit-norm vector without renormalizing.
    ///
    /// Intended for callers that just normalized; the invariant is checked
    /// in debug builds only.
    pub fn from_unit(values: Vec<T>) -> Self {
        debug_assert!({
            let n: T = values.iter().map(|&x| x * x).sum::<T>().sqrt();
            (n - T::one()).abs() < fl(1e-6)
        });
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum())
    }
}

impl<T: Float> AsRef<[T]> for Embedding<T> {
    fn as_ref(&self) -> &[T] {
        &self.values
    }
}

/// Per-sample similarities against the K ID prompts and C OOD prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow<T: Float> {
    id_sims: Vec<T>,
    ood_sims: Vec<T>,
}

impl<T: Float> SimilarityRow<T> {
    /// Build a row, requiring K >= 1 and every entry within [-1, 1] + 1e-9.
    pub fn new(id_sims: Vec<T>, ood_sims: Vec<T>) -> Result<Self> {
        if id_sims.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &s in id_sims.iter().chain(ood_sims.iter()) {
            if s.abs() > T::one() + fl(COS_DRIFT) {
                return Err(Error::NotNormalized {
                    value: s.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(Self { id_sims, ood_sims })
    }

    pub fn id_sims(&self) -> &[T] {
        &self.id_sims
    }

    pub fn ood_sims(&self) -> &[T] {
        &self.ood_sims
    }

    pub fn num_id(&self) -> usize {
        self.id_sims.len()
    }

    pub fn num_ood(&self) -> usize {
        self.ood_sims.len()
    }
}

/// Scale `v` to unit Euclidean norm.
pub fn normalize<T: Float>(v: &[T]) -> Result<Embedding<T>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let norm: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm < fl(1e-12) {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding {
        values: v.iter().map(|&x| x / norm).collect(),
    })
}

/// Cosine similarity of two unit vectors: their dot product.
///
/// Values drifting past [-1, 1] by less than 1e-9 are clamped; larger
/// violations surface as [`Error::NotNormalized`] instead of being masked.
pub fn cosine_similarity<T: Float>(u: &Embedding<T>, v: &Embedding<T>) -> Result<T> {
    let d = u.dot(v)?;
    if d.abs() > T::one() + fl(COS_DRIFT) {
        return Err(Error::NotNormalized {
            value: d.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(num_traits::clamp(d, -T::one(), T::one()))
}

/// Max-shifted log of the sum of exponentials; finite for all finite input.
pub fn log_sum_exp<T: Float>(xs: &[T]) -> Result<T> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = xs.iter().cloned().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        // all entries -inf, or an explicit +inf input
        return Ok(max);
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Temperature softmax over similarities: p_k = exp(s_k/tau) / sum_j exp(s_j/tau).
pub fn softmax_probs<T: Float>(sims: &[T], tau: T) -> Result<Vec<T>> {
    if sims.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tau <= T::zero() {
        return Err(Error::NonPositiveTemperature(
            tau.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let scaled: Vec<T> = sims.iter().map(|&s| s / tau).collect();
    let max = scaled.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn normalize_three_four_five() {
        let e = normalize(&[3.0_f64, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_already_unit() {
        let e = normalize(&[1.0_f64, 0.0, 0.0]).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_rejected() {
        assert!(matches!(
            normalize(&[0.0_f64, 1e-13]),
            Err(Error::ZeroVector)
        ));
    }

    /// Kahan-compensated sum of squares, the independent norm oracle.
    fn compensated_norm(v: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &x in v {
            let y = x * x - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum.sqrt()
    }

    #[test]
    fn normalize_random_512_matches_compensated_oracle() {
        let mut rng = crate::rng::stream_rng(42, 0, 0);
        let v: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = normalize(&v).unwrap();
        let norm = compensated_norm(&v);
        for (a, &b) in e.as_slice().iter().zip(&v) {
            assert!((a - b / norm).abs() < 1e-12);
        }
        assert!((compensated_norm(e.as_slice()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_self_is_one() {
        let e = normalize(&[0.3_f64, -0.2, 0.9]).unwrap();
        assert!((cosine_similarity(&e, &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let u = normalize(&[1.0_f64, 0.0]).unwrap();
        let v = normalize(&[0.0_f64, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_multiply_accumulate_oracle() {
        let mut rng = crate::rng::stream_rng(7, 0, 1);
        let u = normalize(&(0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let v = normalize(&(0..64).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let mut acc = 0.0;
        for (a, b) in u.as_slice().iter().zip(v.as_slice()) {
            acc += a * b;
        }
        assert!((cosine_similarity(&u, &v).unwrap() - acc).abs() < 1e-15);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let u = normalize(&[1.0_f64, 0.0]).unwrap();
        let v = normalize(&[1.0_f64, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_similarity(&u, &v),
            Err(Error::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax_probs(&[0.5_f64, 0.5], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_low_temperature_limit() {
        let p = softmax_probs(&[1.0_f64, 0.0], 0.01).unwrap();
        assert!(p[0] >= 1.0 - 1e-40);
        assert!(p[1] <= 1e-40);
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // direct exponentiation of [0.2, 0.1, 0.0] / 0.1 at 60 decimal digits
        let expected = [
            0.6652409557748219,
            0.24472847105479765,
            0.09003057317038046,
        ];
        let p = softmax_probs(&[0.2_f64, 0.1, 0.0], 0.1).unwrap();
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax_probs::<f64>(&[], 1.0),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            softmax_probs(&[1.0_f64], 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn log_sum_exp_basics() {
        assert!((log_sum_exp(&[0.0_f64, 0.0]).unwrap() - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25_f64]).unwrap(), -3.25);
        let big = log_sum_exp(&[1000.0_f64, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn similarity_row_validation() {
        assert!(SimilarityRow::new(vec![0.5_f64], vec![]).is_ok());
        assert!(matches!(
            SimilarityRow::<f64>::new(vec![], vec![0.1]),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            SimilarityRow::new(vec![1.1_f64], vec![]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn generic_over_f32() {
        let e = normalize(&[3.0_f32, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-6);
        let p = softmax_probs(&[0.5_f32, 0.5], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0_f64..10.0, 8),
            b in proptest::collection::vec(-10.0_f64..10.0, 8),
        ) {
            prop_assume!(a.iter().any(|&x| x.abs() > 1e-6));
            prop_assume!(b.iter().any(|&x| x.abs() > 1e-6));
            let u = normalize(&a).unwrap();
            let v = normalize(&b).unwrap();
            let uv = cosine_similarity(&u, &v).unwrap();
            let vu = cosine_similarity(&v, &u).unwrap();
            prop_assert_eq!(uv, vu);
            prop_assert!(uv.abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            sims in proptest::collection::vec(-5.0_f64..5.0, 1..12),
            shift in -3.0_f64..3.0,
            tau in 0.05_f64..4.0,
        ) {
            let p = softmax_probs(&sims, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);

            let shifted: Vec<f64> = sims.iter().map(|&s| s + shift).collect();
            let q = softmax_probs(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_temperature_equals_prescaled_unit(
            sims in proptest::collection::vec(-5.0_f64..5.0, 1..12),
            tau in 0.05_f64..4.0,
        ) {
            let p = softmax_probs(&sims, tau).unwrap();
            let prescaled: Vec<f64> = sims.iter().map(|&s| s / tau).collect();
            let q = softmax_probs(&prescaled, 1.0).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn log_sum_exp_shift_identity(
            xs in proptest::collection::vec(-50.0_f64..50.0, 1..12),
            c in -100.0_f64..100.0,
        ) {
            let base = log_sum_exp(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|&x| x + c).collect();
            let lifted = log_sum_exp(&shifted).unwrap();
            prop_assert!((lifted - (base + c)).abs() < 1e-9);
        }
    }
}
