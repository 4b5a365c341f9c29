//! Probability-simplex domain types: probability vectors, predictions,
//! labeled samples, datasets and the tie-breaking policy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{bounded, hash_floats, splitmix64};

/// Absolute tolerance on the simplex sum; inputs within it are renormalized.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("not on the probability simplex (sum = {sum})")]
    NotOnSimplex { sum: f64 },
    #[error("class count {k} is below 2")]
    DegenerateK { k: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("mixed class counts in dataset ({first} vs {other})")]
    MixedClassCounts { first: usize, other: usize },
    #[error("{expected} ids supplied for {got} samples")]
    IdCountMismatch { expected: usize, got: usize },
}

/// A point on the probability simplex over `k >= 2` classes.
///
/// Construction validates (and, within [`SIMPLEX_TOLERANCE`], renormalizes)
/// external input; internal computations use the unchecked constructor with
/// invariants guaranteed by the producing arithmetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    /// Validate an externally supplied vector of class probabilities.
    ///
    /// Rejects vectors with fewer than two entries, negative entries, or a
    /// sum deviating from 1 by more than [`SIMPLEX_TOLERANCE`]; accepted
    /// vectors are renormalized to sum exactly.
    pub fn validate(raw: &[f64]) -> Result<Self, ProbError> {
        if raw.len() < 2 {
            return Err(ProbError::DegenerateK { k: raw.len() });
        }
        if raw.iter().any(|v| *v < 0.0) {
            let sum = raw.iter().sum();
            return Err(ProbError::NotOnSimplex { sum });
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || sum.is_nan() {
            return Err(ProbError::NotOnSimplex { sum });
        }
        let probs = raw.iter().map(|v| v / sum).collect();
        Ok(Self { probs })
    }

    /// Numerically stable softmax over raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self, ProbError> {
        if logits.len() < 2 {
            return Err(ProbError::DegenerateK { k: logits.len() });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ProbError::NonFiniteInput);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(Self {
            probs: exps.iter().map(|e| e / sum).collect(),
        })
    }

    /// The uniform vector: every entry exactly `1/k`.
    pub fn uniform(k: usize) -> Result<Self, ProbError> {
        if k < 2 {
            return Err(ProbError::DegenerateK { k });
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
        })
    }

    /// One-hot vector at `class`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self, ProbError> {
        if k < 2 {
            return Err(ProbError::DegenerateK { k });
        }
        if class >= k {
            return Err(ProbError::LabelOutOfRange { label: class, k });
        }
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    /// Wrap values already known to satisfy the simplex invariants
    /// (outputs of softmax-style arithmetic).
    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        Self { probs }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Maximum entry.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices attaining the maximum entry (exact float equality).
    pub fn argmax_set(&self) -> Vec<usize> {
        let max = self.confidence();
        (0..self.probs.len())
            .filter(|&i| self.probs[i] == max)
            .collect()
    }

    /// Resolve the predicted class under the given tie policy.
    pub fn predict(&self, policy: &TieBreakPolicy) -> Prediction {
        let ties = self.argmax_set();
        let class_index = match policy {
            TieBreakPolicy::LowestIndex | TieBreakPolicy::ExpectedValue => ties[0],
            TieBreakPolicy::SeededUniform { seed } => {
                let word = splitmix64(seed ^ hash_floats(&self.probs));
                ties[bounded(word, ties.len())]
            }
        };
        Prediction {
            class_index,
            confidence: self.confidence(),
            tie_count: ties.len(),
        }
    }

    /// Score the correctness indicator of this vector against a label.
    ///
    /// Under `ExpectedValue` a tie contributes its exact hit probability
    /// (`1/tie_count` when the label is among the maximizers) instead of a
    /// random draw; the other policies yield 0 or 1.
    pub fn correctness_score(&self, label: usize, policy: &TieBreakPolicy) -> f64 {
        match policy {
            TieBreakPolicy::ExpectedValue => {
                let ties = self.argmax_set();
                if ties.contains(&label) {
                    1.0 / ties.len() as f64
                } else {
                    0.0
                }
            }
            _ => {
                if self.predict(policy).class_index == label {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How argmax ties (and uniformly re-predicted rejections) are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreakPolicy {
    /// Uniform draw among maximizers, a pure function of (seed, input).
    SeededUniform { seed: u64 },
    /// Deterministic: smallest maximizing index.
    LowestIndex,
    /// Deterministic fractional scoring; makes tie accuracies exact in
    /// expectation rather than sampled.
    ExpectedValue,
}

/// Predicted class, its confidence, and the number of tied maximizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    pub confidence: f64,
    pub tie_count: usize,
}

/// A probability vector paired with its ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub prob: ProbVector,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(prob: ProbVector, label: usize) -> Result<Self, ProbError> {
        if label >= prob.k() {
            return Err(ProbError::LabelOutOfRange { label, k: prob.k() });
        }
        Ok(Self { prob, label })
    }
}

/// A non-empty collection of samples sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self, ProbError> {
        if samples.is_empty() {
            return Err(ProbError::EmptyDataset);
        }
        let k = samples[0].prob.k();
        for s in &samples[1..] {
            if s.prob.k() != k {
                return Err(ProbError::MixedClassCounts {
                    first: k,
                    other: s.prob.k(),
                });
            }
        }
        Ok(Self { samples, ids: None })
    }

    pub fn with_ids(samples: Vec<LabeledSample>, ids: Vec<String>) -> Result<Self, ProbError> {
        if ids.len() != samples.len() {
            return Err(ProbError::IdCountMismatch {
                expected: ids.len(),
                got: samples.len(),
            });
        }
        let mut data = Self::new(samples)?;
        data.ids = Some(ids);
        Ok(data)
    }

    pub fn k(&self) -> usize {
        self.samples[0].prob.k()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty datasets
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample> {
        self.samples.iter()
    }

    /// New dataset holding clones of the rows at `indices` (ids preserved).
    ///
    /// Panics on an out-of-range index or when `indices` is empty.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        assert!(!indices.is_empty(), "subset of no rows");
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let ids = self
            .ids
            .as_ref()
            .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect());
        Dataset {
            samples,
            ids,
        }
    }

    /// A seeded permutation of `0..len()`; the basis of every train split.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut indices: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices
    }
}
