//! The composed calibration map: gate plus base calibrator, fitted under a
//! miscoverage or coverage-accuracy constraint, and its application paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrators::{fit_temperature, BaseCalibrator, CalibError, CalibrationMap};
use crate::gate::{
    fit_coverage_transform, invert_transform, order_statistic_threshold, Gate, GateError,
    IsotonicFit,
};
use crate::prob::{Dataset, LabeledSample, ProbVector, TieBreakPolicy};
use crate::ranking::Ranker;

#[derive(Debug, Error, PartialEq)]
pub enum MetaCalError {
    #[error("no correctly classified samples in the gate split")]
    NoCorrectPredictions,
    #[error("the gate rejects every base-calibrator training sample")]
    EmptyAcceptedTrainingSet,
    #[error("class count mismatch: model expects {expected}, input has {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("coverage mode requires an accuracy-preserving base calibrator")]
    BaseNotAccuracyPreserving,
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Calibration(#[from] CalibError),
}

/// Which constraint the model was fitted under, with its target level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum Mode {
    #[serde(rename = "miscoverage")]
    Miscoverage { alpha: f64 },
    #[serde(rename = "coverage")]
    Coverage { beta: f64 },
}

/// The composed calibration map.
///
/// Accepted inputs pass through the base calibrator; rejected inputs are
/// re-predicted as the uniform vector, whose maximum entry is exactly `1/k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCalModel {
    #[serde(flatten)]
    mode: Mode,
    gate: Gate,
    base: BaseCalibrator,
    k: usize,
    seed: u64,
    /// Number of gate-training negatives (miscoverage mode only); feeds the
    /// exact binomial tail at evaluation time.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    n1: Option<usize>,
    /// The fitted coverage-accuracy transform (coverage mode only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    transform: Option<IsotonicFit>,
}

/// One calibrated output: the emitted probabilities, whether the gate
/// accepted the input, and the input's ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedOutput {
    pub probs: ProbVector,
    pub accepted: bool,
    pub score: f64,
}

/// Gate-training split size: a tenth of the data, capped at 500.
pub fn gate_split_size(n: usize) -> usize {
    (n / 10).min(500)
}

/// Default uniform-mass bin count for the coverage transform: one bin per
/// twenty samples, at least 2, at most 25.
pub fn default_transform_bins(part_a: usize) -> usize {
    (part_a / 20).clamp(2, 25)
}

/// Split off the gate-training part deterministically; the remainder trains
/// the base calibrator. Part-A rows never reach part B.
fn split_parts(data: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let indices = data.shuffled_indices(seed);
    let a = gate_split_size(data.len());
    (indices[..a].to_vec(), indices[a..].to_vec())
}

fn correctness_flags(data: &Dataset, indices: &[usize], seed: u64) -> Vec<bool> {
    let policy = TieBreakPolicy::SeededUniform { seed };
    indices
        .iter()
        .map(|&i| {
            let s = &data.samples()[i];
            s.prob.correctness_score(s.label, &policy) == 1.0
        })
        .collect()
}

fn fit_base_on_accepted(
    data: &Dataset,
    part_b: &[usize],
    gate: &Gate,
) -> Result<BaseCalibrator, MetaCalError> {
    let accepted: Vec<usize> = part_b
        .iter()
        .copied()
        .filter(|&i| gate.accepts(gate.ranker.score(&data.samples()[i].prob)))
        .collect();
    if accepted.is_empty() {
        return Err(MetaCalError::EmptyAcceptedTrainingSet);
    }
    let base = fit_temperature(&data.subset(&accepted))?;
    Ok(BaseCalibrator::Temperature(base))
}

/// Fit under a miscoverage constraint: threshold the ranking scores of the
/// gate split's correctly classified samples at the order statistic for
/// `alpha`, then fit the base calibrator on the accepted remainder.
pub fn fit_miscoverage(
    data: &Dataset,
    alpha: f64,
    ranker: Ranker,
    seed: u64,
) -> Result<MetaCalModel, MetaCalError> {
    let (part_a, part_b) = split_parts(data, seed);
    let correct = correctness_flags(data, &part_a, seed);
    let negative_scores: Vec<f64> = part_a
        .iter()
        .zip(&correct)
        .filter(|(_, &c)| c)
        .map(|(&i, _)| ranker.score(&data.samples()[i].prob))
        .collect();
    if negative_scores.is_empty() {
        return Err(MetaCalError::NoCorrectPredictions);
    }
    let n1 = negative_scores.len();
    let threshold = order_statistic_threshold(&negative_scores, alpha)?;
    let gate = Gate::new(ranker, threshold);
    let base = fit_base_on_accepted(data, &part_b, &gate)?;
    Ok(MetaCalModel {
        mode: Mode::Miscoverage { alpha },
        gate,
        base,
        k: data.k(),
        seed,
        n1: Some(n1),
        transform: None,
    })
}

/// Fit under a coverage-accuracy constraint: estimate the coverage-accuracy
/// transform on the gate split with `b` uniform-mass bins, invert it at
/// `beta`, then fit the base calibrator on the accepted remainder.
pub fn fit_coverage(
    data: &Dataset,
    beta: f64,
    ranker: Ranker,
    b: usize,
    seed: u64,
) -> Result<MetaCalModel, MetaCalError> {
    let (part_a, part_b) = split_parts(data, seed);
    if part_a.len() < 2 * b {
        return Err(MetaCalError::Gate(GateError::TooFewValues {
            n: part_a.len(),
            b,
        }));
    }
    let scores: Vec<f64> = part_a
        .iter()
        .map(|&i| ranker.score(&data.samples()[i].prob))
        .collect();
    let correct = correctness_flags(data, &part_a, seed);
    let transform = fit_coverage_transform(&scores, &correct, b)?;
    let threshold = invert_transform(&transform, beta)?;
    let gate = Gate::new(ranker, threshold);
    let base = fit_base_on_accepted(data, &part_b, &gate)?;
    if !base.accuracy_preserving() {
        return Err(MetaCalError::BaseNotAccuracyPreserving);
    }
    Ok(MetaCalModel {
        mode: Mode::Coverage { beta },
        gate,
        base,
        k: data.k(),
        seed,
        n1: None,
        transform: Some(transform),
    })
}

impl MetaCalModel {
    /// Assemble a model from parts (primarily for tests and deserialization
    /// paths); enforces the coverage-mode accuracy-preservation requirement.
    pub fn from_parts(
        mode: Mode,
        gate: Gate,
        base: BaseCalibrator,
        k: usize,
        seed: u64,
    ) -> Result<Self, MetaCalError> {
        if matches!(mode, Mode::Coverage { .. }) && !base.accuracy_preserving() {
            return Err(MetaCalError::BaseNotAccuracyPreserving);
        }
        Ok(Self {
            mode,
            gate,
            base,
            k,
            seed,
            n1: None,
            transform: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn base(&self) -> &BaseCalibrator {
        &self.base
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n1(&self) -> Option<usize> {
        self.n1
    }

    pub fn transform(&self) -> Option<&IsotonicFit> {
        self.transform.as_ref()
    }

    /// The tie policy implied by the model's seed; used when a rejected
    /// (uniform) output must be collapsed to a single predicted class.
    pub fn tie_policy(&self) -> TieBreakPolicy {
        TieBreakPolicy::SeededUniform { seed: self.seed }
    }

    /// Structural checks applied after deserialization.
    pub fn validate(&self) -> Result<(), MetaCalError> {
        if self.k < 2 {
            return Err(MetaCalError::ClassCountMismatch {
                expected: 2,
                got: self.k,
            });
        }
        if let BaseCalibrator::Temperature(t) = &self.base {
            if t.k() != self.k {
                return Err(MetaCalError::ClassCountMismatch {
                    expected: self.k,
                    got: t.k(),
                });
            }
        }
        if matches!(self.mode, Mode::Coverage { .. }) && !self.base.accuracy_preserving() {
            return Err(MetaCalError::BaseNotAccuracyPreserving);
        }
        Ok(())
    }

    /// Apply the composed map to one input.
    pub fn apply(&self, p: &ProbVector) -> Result<CalibratedOutput, MetaCalError> {
        if p.k() != self.k {
            return Err(MetaCalError::ClassCountMismatch {
                expected: self.k,
                got: p.k(),
            });
        }
        let score = self.gate.ranker.score(p);
        if self.gate.accepts(score) {
            Ok(CalibratedOutput {
                probs: self.base.apply(p)?,
                accepted: true,
                score,
            })
        } else {
            Ok(CalibratedOutput {
                probs: ProbVector::uniform(self.k).expect("k >= 2"),
                accepted: false,
                score,
            })
        }
    }

    /// Apply the map to every sample of a dataset.
    pub fn apply_dataset(&self, data: &Dataset) -> Result<Vec<CalibratedOutput>, MetaCalError> {
        data.iter().map(|s| self.apply(&s.prob)).collect()
    }
}

/// The dataset of calibrated outputs with the original labels and ids,
/// ready for the calibration-error estimators.
pub fn calibrated_dataset(data: &Dataset, outputs: &[CalibratedOutput]) -> Dataset {
    assert_eq!(data.len(), outputs.len());
    let samples: Vec<LabeledSample> = data
        .iter()
        .zip(outputs)
        .map(|(s, o)| LabeledSample::new(o.probs.clone(), s.label).expect("label in range"))
        .collect();
    match data.ids() {
        Some(ids) => Dataset::with_ids(samples, ids.to_vec()).expect("lengths match"),
        None => Dataset::new(samples).expect("non-empty"),
    }
}

/// The original construction that the analytic identities quantify: accepted
/// inputs collapse to a one-hot vector at the (tie-broken) argmax, rejected
/// inputs to the uniform vector. Only used by the verification harnesses.
pub fn naive_apply(gate: &Gate, p: &ProbVector, policy: &TieBreakPolicy) -> CalibratedOutput {
    let score = gate.ranker.score(p);
    if gate.accepts(score) {
        let class = p.predict(policy).class_index;
        CalibratedOutput {
            probs: ProbVector::one_hot(p.k(), class).expect("valid class"),
            accepted: true,
            score,
        }
    } else {
        CalibratedOutput {
            probs: ProbVector::uniform(p.k()).expect("k >= 2"),
            accepted: false,
            score,
        }
    }
}
