//! Empirical conditional entropy `Ĥ(Y|Z) = -E[log2 q(y|z)]` of an adversary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::classifier::argmax;

/// Probabilities below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Which part of the latent code an adversary sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryView {
    /// Transmitted codes `Z•`.
    Public,
    /// Per-sample residual `Z∘`.
    Private,
    /// Both, concatenated.
    Both,
}

impl AdversaryView {
    pub const ALL: [AdversaryView; 3] = [AdversaryView::Public, AdversaryView::Private, AdversaryView::Both];

    pub fn name(self) -> &'static str {
        match self {
            AdversaryView::Public => "public",
            AdversaryView::Private => "private",
            AdversaryView::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub view: String,
    pub classes: usize,
    pub samples: usize,
    pub entropy_bits: f64,
    pub accuracy: f64,
}

/// `-log2 q(y|z)` from logits, computed as `log2 sum_j exp(l_j - l_y)` so
/// that equal logits give exactly `log2 C`.
pub fn surprisal_bits(logits: &[f64], label: usize) -> f64 {
    let ly = logits[label];
    let sum: f64 = logits.iter().map(|l| (l - ly).exp()).sum();
    sum.log2().min(-PROBABILITY_FLOOR.log2())
}

/// `-log2 p` for an explicit probability.
pub fn probability_bits(p: f64) -> f64 {
    -p.max(PROBABILITY_FLOOR).log2()
}

/// Mean of per-sample surprisals; identical values average to themselves.
pub fn mean_bits(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values.first().copied().unwrap_or(0.0);
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + comp) / values.len() as f64
}

/// Entropy and accuracy of a `[N, C]` logit matrix against labels.
pub fn report_from_logits(view: &str, logits: &Tensor, labels: &[usize]) -> Result<PrivacyReport> {
    let (n, c) = (logits.batch(), logits.item_len());
    if n == 0 || labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if labels.len() != n {
        return Err(Error::shape("entropy labels", &[n], &[labels.len()]));
    }
    let mut bits = Vec::with_capacity(n);
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Config(format!("label {y} outside {c} classes")));
        }
        let row = logits.item(i);
        bits.push(surprisal_bits(row, y));
        correct += usize::from(argmax(row) == y);
    }
    Ok(PrivacyReport {
        view: view.to_string(),
        classes: c,
        samples: n,
        entropy_bits: mean_bits(&bits),
        accuracy: correct as f64 / n as f64,
    })
}

/// Entropy and accuracy from per-sample class distributions.
pub fn report_from_probabilities(view: &str, probs: &[Vec<f64>], labels: &[usize]) -> Result<PrivacyReport> {
    if probs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if labels.len() != probs.len() {
        return Err(Error::shape("entropy labels", &[probs.len()], &[labels.len()]));
    }
    let c = probs[0].len();
    let mut bits = Vec::with_capacity(probs.len());
    let mut correct = 0;
    for (p, &y) in probs.iter().zip(labels) {
        if p.len() != c || y >= c {
            return Err(Error::Config(format!("distribution/label mismatch for label {y}")));
        }
        bits.push(probability_bits(p[y]));
        correct += usize::from(argmax(p) == y);
    }
    Ok(PrivacyReport {
        view: view.to_string(),
        classes: c,
        samples: probs.len(),
        entropy_bits: mean_bits(&bits),
        accuracy: correct as f64 / probs.len() as f64,
    })
}

/// Adversary that predicts the uniform distribution over `classes`.
pub fn uniform_report(classes: usize, labels: &[usize]) -> Result<PrivacyReport> {
    if classes == 0 {
        return Err(Error::Config("uniform adversary needs at least one class".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("test set"));
    }
    report_from_logits("uniform", &Tensor::zeros(&[labels.len(), classes]), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_over_four_is_two_bits() {
        let r = uniform_report(4, &[0, 1, 2, 3, 3, 1, 0]).unwrap();
        assert_eq!(r.entropy_bits, 2.0);
    }

    #[test]
    fn uniform_is_exactly_log2_c() {
        for c in 2..300 {
            for n in [1, 7, 100, 999, 4096] {
                let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
                assert_eq!(uniform_report(c, &labels).unwrap().entropy_bits, (c as f64).log2(), "C={c} N={n}");
            }
        }
    }

    #[test]
    fn oracle_adversary_is_zero_bits() {
        let probs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let r = report_from_probabilities("oracle", &probs, &[0, 2]).unwrap();
        assert_eq!(r.entropy_bits, 0.0);
        assert_eq!(r.accuracy, 1.0);
        let logits = Tensor::from_vec(&[1, 2], vec![1e6, 0.0]).unwrap();
        assert_eq!(report_from_logits("x", &logits, &[0]).unwrap().entropy_bits, 0.0);
    }

    #[test]
    fn floor_caps_confident_mistakes() {
        let r = report_from_probabilities("x", &[vec![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(r.entropy_bits, -PROBABILITY_FLOOR.log2());
        let logits = Tensor::from_vec(&[1, 2], vec![1e6, 0.0]).unwrap();
        assert_eq!(report_from_logits("x", &logits, &[1]).unwrap().entropy_bits, -PROBABILITY_FLOOR.log2());
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(matches!(uniform_report(3, &[]), Err(Error::Empty(_))));
        assert!(matches!(report_from_probabilities("x", &[], &[]), Err(Error::Empty(_))));
    }

    proptest! {
        #[test]
        fn logit_bits_match_natural_log_oracle(logits in prop::collection::vec(-8.0f64..8.0, 2..8), pick in 0usize..8) {
            let y = pick % logits.len();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let nats = z.ln() - (logits[y] - max);
            let bits = surprisal_bits(&logits, y);
            prop_assert!(bits >= 0.0);
            prop_assert!((bits - nats / std::f64::consts::LN_2).abs() < 1e-9);
        }

        #[test]
        fn mean_bits_is_non_negative_and_bounded(values in prop::collection::vec(0.0f64..40.0, 1..50)) {
            let m = mean_bits(&values);
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(0.0, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }
    }
}
