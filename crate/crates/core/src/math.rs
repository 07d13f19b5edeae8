//! Prediction function, entropies, and the two losses shared by search and
//! refinement.

use serde::{Deserialize, Serialize};

use crate::embedding_store::{dot64, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Softmax temperature applied to cosine similarities.
    pub tau: f64,
    /// Weight of the diversity (mean-prediction entropy) term.
    pub lambda_div: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            tau: 0.02,
            lambda_div: 0.6,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_div >= 0.0 && self.lambda_div.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_div must be >= 0, got {}",
                self.lambda_div
            )));
        }
        Ok(())
    }
}

/// A probability vector over `K` centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps `p` after checking it is non-negative and sums to one.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if p.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Domain("negative or NaN probability".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(ProbVector(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the first maximal entry.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax(sims / tau)` with max subtraction.
pub fn softmax_scaled(sims: &[f64], tau: f64) -> Result<ProbVector> {
    if sims.is_empty() {
        return Err(Error::Domain("no centers to predict over".into()));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = sims.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(ProbVector(p))
}

/// Temperature-scaled softmax over cosine similarities between `z` and each
/// row of `centers`. Both sides are expected to be unit-norm.
pub fn predict(z: &[f32], centers: &EmbeddingMatrix, cfg: &PredictionConfig) -> Result<ProbVector> {
    if centers.is_empty() {
        return Err(Error::Domain("predict called with no centers".into()));
    }
    if centers.dims() != z.len() {
        return Err(Error::Shape(format!(
            "embedding has {} dims, centers have {}",
            z.len(),
            centers.dims()
        )));
    }
    let sims: Vec<f64> = centers.iter_rows().map(|c| dot64(z, c)).collect();
    softmax_scaled(&sims, cfg.tau)
}

#[inline]
pub(crate) fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(&p.0)
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// Entropy divided by `ln K`; zero for a single center.
pub fn normalized_entropy(p: &ProbVector) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    (entropy(p) / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Information-maximization clustering loss: mean per-sample entropy minus
/// `lambda_div` times the entropy of the mean prediction.
pub fn im_loss(preds: &[ProbVector], cfg: &PredictionConfig) -> Result<f64> {
    let k = match preds.first() {
        Some(p) => p.len(),
        None => return Err(Error::Domain("im_loss over an empty batch".into())),
    };
    let mut mean = vec![0f64; k];
    let mut ent = 0f64;
    for p in preds {
        if p.len() != k {
            return Err(Error::Shape(format!(
                "prediction lengths differ: {} vs {k}",
                p.len()
            )));
        }
        ent += entropy(p);
        for (m, &v) in mean.iter_mut().zip(&p.0) {
            *m += v;
        }
    }
    let n = preds.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(ent / n - cfg.lambda_div * entropy_of(&mean))
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy(preds: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Domain("cross_entropy over an empty batch".into()));
    }
    let mut total = 0f64;
    for (p, &y) in preds.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::Domain(format!("label {y} outside [0, {})", p.len())));
        }
        total -= p.0[y].max(PROB_FLOOR).ln();
    }
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::l2_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn one_hot(k: usize, i: usize) -> ProbVector {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        pv(&v)
    }

    #[test]
    fn equal_similarities_give_uniform() {
        let p = softmax_scaled(&[0.3; 5], 0.02).unwrap();
        for &v in p.as_slice() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_two_way() {
        let p = softmax_scaled(&[1.0, 0.0], 0.02).unwrap();
        let expect = 1.0 / (1.0 + (-50f64).exp());
        assert!((p.as_slice()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_naive_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PredictionConfig::default();
        let raw: Vec<f32> = (0..6 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = l2_normalize(&EmbeddingMatrix::new(6, 16, raw).unwrap()).unwrap();
        let z = m.row(0).to_vec();
        let centers = m.select_rows(&[1, 2, 3, 4, 5]);
        let p = predict(&z, &centers, &cfg).unwrap();
        // direct exp/sum without max subtraction
        let e: Vec<f64> = (1..6)
            .map(|j| {
                let s: f64 = (0..16).map(|k| z[k] as f64 * m.row(j)[k] as f64).sum();
                (s / cfg.tau).exp()
            })
            .collect();
        let total: f64 = e.iter().sum();
        for (a, b) in p.as_slice().iter().zip(&e) {
            assert!((a - b / total).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_needs_centers() {
        let empty = EmbeddingMatrix::zeros(0, 3);
        assert!(matches!(
            predict(&[1.0, 0.0, 0.0], &empty, &PredictionConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&one_hot(3, 1)), 0.0);
        assert!((entropy(&pv(&[0.25; 4])) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy(&pv(&[0.5, 0.5])) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn normalized_entropy_values() {
        for k in 2..10 {
            let p = pv(&vec![1.0 / k as f64; k]);
            assert!((normalized_entropy(&p) - 1.0).abs() < 1e-12);
        }
        assert_eq!(normalized_entropy(&one_hot(4, 2)), 0.0);
        assert_eq!(normalized_entropy(&pv(&[1.0])), 0.0);
    }

    #[test]
    fn im_loss_fixed_points() {
        let cfg = PredictionConfig::default();
        let same = vec![one_hot(4, 2); 8];
        assert_eq!(im_loss(&same, &cfg).unwrap(), 0.0);

        let uniform = vec![pv(&[0.25; 4]); 5];
        let l = im_loss(&uniform, &cfg).unwrap();
        assert!((l - 0.4 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 0.5545).abs() < 1e-4);

        let spread: Vec<_> = (0..12).map(|i| one_hot(4, i % 4)).collect();
        let l = im_loss(&spread, &cfg).unwrap();
        assert!((l + 0.6 * 4f64.ln()).abs() < 1e-12);

        assert!(matches!(im_loss(&[], &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let perfect = vec![one_hot(3, 0), one_hot(3, 2)];
        assert_eq!(cross_entropy(&perfect, &[0, 2]).unwrap(), 0.0);
        let uniform = vec![pv(&[0.2; 5]); 3];
        assert!((cross_entropy(&uniform, &[0, 1, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 1, 5]),
            Err(Error::Domain(_))
        ));
        // floored, not infinite
        let wrong = vec![one_hot(2, 0)];
        assert!((cross_entropy(&wrong, &[1]).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<ProbVector> = (0..7)
            .map(|_| {
                let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                softmax_scaled(&s, 0.3).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..7).map(|i| i % 4).collect();
        let direct: f64 = preds
            .iter()
            .zip(&labels)
            .map(|(p, &y)| -p.as_slice()[y].ln())
            .sum::<f64>()
            / 7.0;
        assert!((cross_entropy(&preds, &labels).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn im_loss_sharpening_is_monotone() {
        let cfg = PredictionConfig::default();
        let k = 4;
        let mut last = f64::INFINITY;
        for step in 0..=60 {
            let beta = step as f64 * 0.25;
            let preds: Vec<ProbVector> = (0..16)
                .map(|i| {
                    let logits: Vec<f64> = (0..k)
                        .map(|j| if j == i % k { beta } else { 0.0 })
                        .collect();
                    softmax_scaled(&logits, 1.0).unwrap()
                })
                .collect();
            let l = im_loss(&preds, &cfg).unwrap();
            assert!(l <= last + 1e-12, "beta={beta}: {l} > {last}");
            last = l;
        }
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-9);
            let p = pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
            let nh = normalized_entropy(&p);
            prop_assert!((0.0..=1.0).contains(&nh));
        }

        #[test]
        fn uniform_beats_perturbations(k in 2usize..10, eps in 1e-4f64..0.05, i in 0usize..10, j in 0usize..10) {
            let (i, j) = (i % k, j % k);
            prop_assume!(i != j);
            let mut v = vec![1.0 / k as f64; k];
            let d = eps.min(v[j]);
            v[i] += d;
            v[j] -= d;
            prop_assert!(entropy(&pv(&v)) < (k as f64).ln());
        }

        #[test]
        fn softmax_is_shift_invariant(sims in prop::collection::vec(-1.0f64..1.0, 1..8), c in -1.0f64..1.0) {
            let a = softmax_scaled(&sims, 0.02).unwrap();
            let shifted: Vec<f64> = sims.iter().map(|s| s + c).collect();
            let b = softmax_scaled(&shifted, 0.02).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
