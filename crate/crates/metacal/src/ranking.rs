//! Ranking models: real-valued scorers ordering inputs by how likely their
//! prediction is wrong. Higher score means more likely misclassified.

use serde::{Deserialize, Serialize};

use crate::prob::ProbVector;

/// The available ranking models, referenced by a stable string id in
/// serialized gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ranker {
    /// Shannon entropy of the probability vector (natural log).
    #[serde(rename = "entropy")]
    Entropy,
}

impl Ranker {
    pub fn score(&self, p: &ProbVector) -> f64 {
        match self {
            Ranker::Entropy => entropy_score(p),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Ranker::Entropy => "entropy",
        }
    }

    pub fn from_id(id: &str) -> Option<Ranker> {
        match id {
            "entropy" => Some(Ranker::Entropy),
            _ => None,
        }
    }
}

/// Shannon entropy in nats, with `0 * ln 0 = 0`. Ranges over `[0, ln k]`.
pub fn entropy_score(p: &ProbVector) -> f64 {
    p.probs()
        .iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_has_zero_entropy() {
        let p = ProbVector::one_hot(3, 0).unwrap();
        assert_eq!(entropy_score(&p), 0.0);
    }

    #[test]
    fn uniform_attains_log_k() {
        let p = ProbVector::uniform(4).unwrap();
        assert!((entropy_score(&p) - 4.0_f64.ln()).abs() < 1e-12);
        assert!((entropy_score(&p) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn hand_evaluated_example() {
        let p = ProbVector::validate(&[0.7, 0.2, 0.1]).unwrap();
        assert!((entropy_score(&p) - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn id_round_trip() {
        assert_eq!(Ranker::from_id("entropy"), Some(Ranker::Entropy));
        assert_eq!(Ranker::Entropy.id(), "entropy");
        assert_eq!(Ranker::from_id("nope"), None);
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(logits in proptest::collection::vec(-6.0_f64..6.0, 2..8), rot in 0usize..8) {
            let p = ProbVector::from_logits(&logits).unwrap();
            let mut shifted = logits.clone();
            shifted.rotate_left(rot % logits.len());
            let q = ProbVector::from_logits(&shifted).unwrap();
            prop_assert!((entropy_score(&p) - entropy_score(&q)).abs() < 1e-9);
        }

        #[test]
        fn entropy_bounded_by_log_k(logits in proptest::collection::vec(-30.0_f64..30.0, 2..10)) {
            let p = ProbVector::from_logits(&logits).unwrap();
            let h = entropy_score(&p);
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (p.k() as f64).ln() + 1e-12);
        }
    }
}
