//! Cosine-similarity saliency, the mean-squared saliency loss, and
//! inference-time saliency pooling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, Real};

/// Pool radius used when none is given (a 3-tap window).
pub const DEFAULT_POOL_RADIUS: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaliencyError {
    #[error("zero-norm embedding{}", .index.map(|i| format!(" for frame {i}")).unwrap_or_default())]
    ZeroNorm { index: Option<usize> },
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("empty input")]
    Empty,
}

fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T, SaliencyError> {
    if a.len() != b.len() {
        return Err(SaliencyError::Length {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(SaliencyError::ZeroNorm { index: None });
    }
    let sim = dot(a, b) / (na * nb);
    Ok(sim.max(-T::one()).min(T::one()))
}

/// Gradients of `grad_out · sim(a, b)` with respect to `a` and `b`:
/// `∂sim/∂a = b/(‖a‖‖b‖) − sim·a/‖a‖²`, symmetrically for `b`.
///
/// Uses the unclamped similarity so the result is the exact derivative.
pub fn cosine_backward<T: Real>(a: &[T], b: &[T], grad_out: T) -> Result<(Vec<T>, Vec<T>), SaliencyError> {
    if a.len() != b.len() {
        return Err(SaliencyError::Length {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(SaliencyError::ZeroNorm { index: None });
    }
    let inv = T::one() / (na * nb);
    let sim = dot(a, b) * inv;
    let (ia2, ib2) = (T::one() / (na * na), T::one() / (nb * nb));
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| grad_out * (y * inv - sim * x * ia2))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| grad_out * (x * inv - sim * y * ib2))
        .collect();
    Ok((ga, gb))
}

/// Cosine of every frame embedding against the same query embedding.
pub fn score_video<T: Real, F: AsRef<[T]>>(frames: &[F], query: &[T]) -> Result<Vec<T>, SaliencyError> {
    if frames.is_empty() {
        return Err(SaliencyError::Empty);
    }
    frames
        .iter()
        .enumerate()
        .map(|(j, f)| {
            cosine_similarity(f.as_ref(), query).map_err(|e| match e {
                SaliencyError::ZeroNorm { .. } => SaliencyError::ZeroNorm { index: Some(j) },
                other => other,
            })
        })
        .collect()
}

/// Windowed mean over `[j − radius, j + radius]`, truncated at the ends.
///
/// Sums are taken in `f64`, and each output is clamped to its window's
/// range so a constant input maps to itself exactly.
pub fn saliency_pool(raw: &[f32], radius: usize) -> Vec<f32> {
    if radius == 0 {
        return raw.to_vec();
    }
    let k = raw.len();
    (0..k)
        .map(|j| {
            let window = &raw[j.saturating_sub(radius)..(j + radius + 1).min(k)];
            let mean = window.iter().map(|&v| v as f64).sum::<f64>() / window.len() as f64;
            let lo = window.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = window.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (mean as f32).clamp(lo, hi)
        })
        .collect()
}

/// Mean squared error over every (video, clip) pair and its gradient with
/// respect to the predictions.
pub fn saliency_loss_and_grads<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>), SaliencyError> {
    if pred.len() != target.len() {
        return Err(SaliencyError::Length {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(SaliencyError::Empty);
    }
    let m = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(target) {
        let diff = p - y;
        loss = loss + diff * diff;
        grad.push(two * diff / m);
    }
    Ok((loss / m, grad))
}

/// Per-clip predictions for one (video, query) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPrediction {
    pub qid: i64,
    pub vid: String,
    pub raw: Vec<f32>,
    pub pooled: Option<Vec<f32>>,
    pub pool_radius: usize,
}

impl SaliencyPrediction {
    pub fn new(qid: i64, vid: impl Into<String>, raw: Vec<f32>) -> Self {
        Self {
            qid,
            vid: vid.into(),
            raw,
            pooled: None,
            pool_radius: 0,
        }
    }

    pub fn with_pooling(mut self, radius: usize) -> Self {
        self.pooled = (radius > 0).then(|| saliency_pool(&self.raw, radius));
        self.pool_radius = radius;
        self
    }

    /// Pooled scores when present, raw otherwise.
    pub fn scores(&self) -> &[f32] {
        self.pooled.as_deref().unwrap_or(&self.raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_cases() {
        let v = [0.3f64, -2.0, 5.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 24 / (5 * 5)
        assert!((cosine_similarity(&[3.0f64, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&[0.0f32, 0.0], &[1.0, 0.0]).unwrap_err(),
            SaliencyError::ZeroNorm { index: None }
        );
        assert!(cosine_similarity(&[1.0f32], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn score_video_cases() {
        let q = [1.0f64, 0.0];
        let frames = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(score_video(&frames, &q).unwrap(), vec![1.0, 0.0, -1.0]);
        let frames = vec![vec![2.0, 0.0]; 4];
        assert_eq!(score_video(&frames, &q).unwrap(), vec![1.0; 4]);
        let single = vec![vec![3.0, 4.0]];
        assert_eq!(
            score_video(&single, &[4.0, 3.0]).unwrap(),
            vec![cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap()]
        );
        let bad = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(
            score_video(&bad, &q).unwrap_err(),
            SaliencyError::ZeroNorm { index: Some(1) }
        );
        assert_eq!(score_video::<f64, Vec<f64>>(&[], &q).unwrap_err(), SaliencyError::Empty);
    }

    #[test]
    fn pooling_cases() {
        let raw = [0.3f32, -0.2, 0.9];
        assert_eq!(saliency_pool(&raw, 0), raw.to_vec());
        assert_eq!(saliency_pool(&[0.1f32; 6], 2), vec![0.1f32; 6]);
        let out = saliency_pool(&[0.0, 1.0, 0.0, 0.0], 1);
        let expected = [0.5, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        // radius wider than the sequence averages everything
        assert_eq!(saliency_pool(&[1.0, 3.0], 10), vec![2.0, 2.0]);
    }

    #[test]
    fn loss_cases() {
        let (l, g) = saliency_loss_and_grads(&[0.2f64, 0.4], &[0.2, 0.4]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = saliency_loss_and_grads(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![1.0, -1.0]);
        assert!(saliency_loss_and_grads::<f32>(&[], &[]).is_err());
        assert!(saliency_loss_and_grads(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_gradient_matches_central_differences() {
        let a = [0.3f64, -1.2, 0.8];
        let b = [1.1f64, 0.4, -0.5];
        let h = 1e-5;
        let (ga, gb) = cosine_backward(&a, &b, 1.0).unwrap();
        for i in 0..3 {
            let mut ap = a;
            ap[i] += h;
            let mut am = a;
            am[i] -= h;
            let fd = (cosine_similarity(&ap, &b).unwrap() - cosine_similarity(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() / fd.abs().max(1e-6) < 1e-4);
            let mut bp = b;
            bp[i] += h;
            let mut bm = b;
            bm[i] -= h;
            let fd = (cosine_similarity(&a, &bp).unwrap() - cosine_similarity(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn prediction_scores_prefer_pooled() {
        let p = SaliencyPrediction::new(1, "v", vec![0.0, 1.0, 0.0]);
        assert_eq!(p.scores(), &[0.0, 1.0, 0.0]);
        let p = p.with_pooling(1);
        assert_eq!(p.pool_radius, 1);
        assert_eq!(p.scores(), saliency_pool(&[0.0, 1.0, 0.0], 1).as_slice());
        assert!(p.clone().with_pooling(0).pooled.is_none());
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 4).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(a in nonzero_vec(), b in nonzero_vec(), s in 0.01f64..50.0, t in 0.01f64..50.0) {
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            prop_assert!((ab - cosine_similarity(&sa, &tb).unwrap()).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn pool_stays_in_range(raw in prop::collection::vec(-1.0f32..1.0, 1..40), r in 0usize..6) {
            let out = saliency_pool(&raw, r);
            let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(out.len(), raw.len());
            prop_assert!(out.iter().all(|&v| lo <= v && v <= hi));
        }

        #[test]
        fn pool_is_monotone(raw in prop::collection::vec(-1.0f32..1.0, 1..30), bump in prop::collection::vec(0.0f32..0.5, 30), r in 0usize..5) {
            let raised: Vec<f32> = raw.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let lo = saliency_pool(&raw, r);
            let hi = saliency_pool(&raised, r);
            prop_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        }

        #[test]
        fn loss_nonnegative_zero_iff_equal(pred in prop::collection::vec(-1.0f64..1.0, 1..20), shift in prop::collection::vec(-0.5f64..0.5, 20)) {
            let target: Vec<f64> = pred.iter().zip(&shift).map(|(p, s)| p + s).collect();
            let (l, g) = saliency_loss_and_grads(&pred, &target).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, pred == target);
            let h = 1e-6;
            for i in 0..pred.len() {
                let mut p = pred.clone();
                p[i] += h;
                let (lp, _) = saliency_loss_and_grads(&p, &target).unwrap();
                p[i] -= 2.0 * h;
                let (lm, _) = saliency_loss_and_grads(&p, &target).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }
}
