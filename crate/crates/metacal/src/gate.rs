//! The binary accept/reject gate over ranking scores, built either from an
//! order statistic of scores on correctly classified samples or by inverting
//! an empirical coverage-accuracy transform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::uniform_mass_cuts;
use crate::ranking::Ranker;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("no correctly classified samples to threshold")]
    EmptyNegatives,
    #[error("tolerance too small: order statistic {v} exceeds the {n1} available scores")]
    ToleranceTooSmall { v: usize, n1: usize },
    #[error("tolerance must lie strictly between 0 and 1 (got {value})")]
    InvalidTolerance { value: f64 },
    #[error("{n} values cannot fill {b} bins (need at least 2 bins and n >= b)")]
    TooFewValues { n: usize, b: usize },
    #[error("requested accuracy {beta} exceeds the largest attainable value {max}")]
    UnreachableAccuracy { beta: f64, max: f64 },
}

/// Threshold gate: reject exactly when the ranking score strictly exceeds
/// the threshold, so a score tied with the threshold is accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    #[serde(rename = "ranker_id")]
    pub ranker: Ranker,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Reject,
}

impl Gate {
    pub fn new(ranker: Ranker, threshold: f64) -> Self {
        Self { ranker, threshold }
    }

    pub fn classify(&self, score: f64) -> GateDecision {
        if score > self.threshold {
            GateDecision::Reject
        } else {
            GateDecision::Accept
        }
    }

    pub fn accepts(&self, score: f64) -> bool {
        self.classify(score) == GateDecision::Accept
    }
}

/// Ceiling that tolerates the upward rounding of a float product, so that
/// e.g. `(9+1) * (1 - 0.1)` yields 9 and not 10.
fn guarded_ceil(x: f64) -> usize {
    (x - 1e-9).ceil().max(1.0) as usize
}

/// The order statistic rank used by the miscoverage gate:
/// `v = ceil((n1 + 1) (1 - alpha))`.
pub fn order_statistic_rank(n1: usize, alpha: f64) -> Result<usize, GateError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GateError::InvalidTolerance { value: alpha });
    }
    let v = guarded_ceil((n1 as f64 + 1.0) * (1.0 - alpha));
    if v > n1 {
        return Err(GateError::ToleranceTooSmall { v, n1 });
    }
    Ok(v)
}

/// The v-th smallest of the ranking scores of correctly classified samples,
/// with `v = ceil((n1 + 1)(1 - alpha))`. Ties are kept as-is in the sorted
/// multiset (stable sort); rejecting only on strict excess then errs toward
/// acceptance.
pub fn order_statistic_threshold(negative_scores: &[f64], alpha: f64) -> Result<f64, GateError> {
    if negative_scores.is_empty() {
        return Err(GateError::EmptyNegatives);
    }
    let v = order_statistic_rank(negative_scores.len(), alpha)?;
    let mut sorted = negative_scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[v - 1])
}

/// A fitted decreasing step estimate of the coverage-accuracy transform:
/// knot scores rise strictly, fitted values never rise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    pub knots: Vec<Knot>,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub score: f64,
    pub value: f64,
}

impl IsotonicFit {
    pub fn max_value(&self) -> f64 {
        self.knots[0].value
    }

    pub fn min_value(&self) -> f64 {
        self.knots[self.knots.len() - 1].value
    }
}

/// Whether the transform's y-coordinates accumulate accuracy over all bins
/// up to the knot (the default) or use each bin in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyAggregation {
    Cumulative,
    PerBin,
}

/// Estimate the coverage-accuracy transform from ranking scores and
/// correctness flags.
///
/// Scores are split into `b` uniform-mass bins; knot `j` pairs the mean
/// score of bin `j` with the accuracy accumulated over bins `1..=j`, and a
/// decreasing isotonic regression (pool-adjacent-violators on the negated
/// values, weighted by the cumulative counts) smooths the knots.
pub fn fit_coverage_transform(
    scores: &[f64],
    correct: &[bool],
    b: usize,
) -> Result<IsotonicFit, GateError> {
    fit_coverage_transform_with(scores, correct, b, AccuracyAggregation::Cumulative)
}

pub fn fit_coverage_transform_with(
    scores: &[f64],
    correct: &[bool],
    b: usize,
    aggregation: AccuracyAggregation,
) -> Result<IsotonicFit, GateError> {
    assert_eq!(scores.len(), correct.len(), "scores and flags must pair up");
    let n = scores.len();
    if b < 2 || n < b {
        return Err(GateError::TooFewValues { n, b });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    let cuts = uniform_mass_cuts(n, b);
    let mut xs = Vec::with_capacity(b);
    let mut ys = Vec::with_capacity(b);
    let mut ws = Vec::with_capacity(b);
    let mut hits_so_far = 0.0f64;
    let mut hits_in_bin;
    for j in 0..b {
        let lo = cuts[j];
        let hi = cuts[j + 1];
        let mean_score: f64 =
            order[lo..hi].iter().map(|&i| scores[i]).sum::<f64>() / (hi - lo) as f64;
        hits_in_bin = order[lo..hi].iter().filter(|&&i| correct[i]).count() as f64;
        hits_so_far += hits_in_bin;
        let accuracy = match aggregation {
            AccuracyAggregation::Cumulative => hits_so_far / hi as f64,
            AccuracyAggregation::PerBin => hits_in_bin / (hi - lo) as f64,
        };
        xs.push(mean_score);
        ys.push(accuracy);
        ws.push(hi as f64);
    }

    // Massive score ties can collapse adjacent bin means; keep only the last
    // knot of such a group (it already summarizes the earlier ones).
    let mut keep = Vec::with_capacity(b);
    for j in 0..b {
        if j + 1 < b && xs[j + 1] == xs[j] {
            continue;
        }
        keep.push(j);
    }
    let xs: Vec<f64> = keep.iter().map(|&j| xs[j]).collect();
    let ys: Vec<f64> = keep.iter().map(|&j| ys[j]).collect();
    let ws: Vec<f64> = keep.iter().map(|&j| ws[j]).collect();

    let fitted = pava_decreasing(&ys, &ws);
    Ok(IsotonicFit {
        knots: xs
            .into_iter()
            .zip(fitted)
            .map(|(score, value)| Knot { score, value })
            .collect(),
        bins: b,
    })
}

/// Weighted least-squares monotone non-increasing fit via
/// pool-adjacent-violators (run increasing on the negated values).
pub fn pava_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    pava_increasing(&negated, weights)
        .into_iter()
        .map(|v| -v)
        .collect()
}

fn pava_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // Blocks of (pooled value, pooled weight, member count).
    let mut value = Vec::with_capacity(values.len());
    let mut weight = Vec::with_capacity(values.len());
    let mut count = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        value.push(v);
        weight.push(w);
        count.push(1usize);
        while value.len() > 1 && value[value.len() - 2] > value[value.len() - 1] {
            let (v1, w1, c1) = (value.pop().unwrap(), weight.pop().unwrap(), count.pop().unwrap());
            let last = value.len() - 1;
            let pooled_w = weight[last] + w1;
            value[last] = (value[last] * weight[last] + v1 * w1) / pooled_w;
            weight[last] = pooled_w;
            count[last] += c1;
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (v, c) in value.into_iter().zip(count) {
        for _ in 0..c {
            out.push(v);
        }
    }
    out
}

/// How `invert_transform` turns the step fit back into a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inversion {
    /// Largest knot score whose fitted value still reaches the target; the
    /// conservative default.
    Step,
    /// Piecewise-linear interpolation between bracketing knots.
    Linear,
}

/// Invert the fitted transform at a target coverage accuracy: the returned
/// threshold accepts as much as the knot set allows while keeping the fitted
/// accuracy at or above `beta`.
pub fn invert_transform(fit: &IsotonicFit, beta: f64) -> Result<f64, GateError> {
    invert_transform_with(fit, beta, Inversion::Step)
}

pub fn invert_transform_with(fit: &IsotonicFit, beta: f64, rule: Inversion) -> Result<f64, GateError> {
    let max = fit.max_value();
    if beta > max {
        return Err(GateError::UnreachableAccuracy { beta, max });
    }
    // Values are non-increasing, so knots meeting the target form a prefix.
    let last_ok = fit
        .knots
        .iter()
        .rposition(|k| k.value >= beta)
        .expect("beta <= max value guarantees a qualifying knot");
    match rule {
        Inversion::Step => Ok(fit.knots[last_ok].score),
        Inversion::Linear => {
            if last_ok + 1 == fit.knots.len() {
                return Ok(fit.knots[last_ok].score);
            }
            let a = &fit.knots[last_ok];
            let b = &fit.knots[last_ok + 1];
            // a.value >= beta > b.value, so the denominator is positive.
            let t = (a.value - beta) / (a.value - b.value);
            Ok(a.score + t * (b.score - a.score))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(order_statistic_rank(99, 0.05).unwrap(), 95);
        assert_eq!(order_statistic_rank(19, 0.05).unwrap(), 19);
        assert_eq!(
            order_statistic_rank(10, 0.05),
            Err(GateError::ToleranceTooSmall { v: 11, n1: 10 })
        );
        // Exact integer product: (9+1) * 0.9 must give 9, not 10.
        assert_eq!(order_statistic_rank(9, 0.1).unwrap(), 9);
        assert_eq!(order_statistic_rank(19, 0.0), Err(GateError::InvalidTolerance { value: 0.0 }));
    }

    #[test]
    fn threshold_picks_the_vth_smallest() {
        let scores: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        assert_eq!(order_statistic_threshold(&scores, 0.05).unwrap(), 95.0);

        let scores: Vec<f64> = (1..=19).rev().map(|i| i as f64 * 0.5).collect();
        assert_eq!(order_statistic_threshold(&scores, 0.05).unwrap(), 9.5);

        assert_eq!(
            order_statistic_threshold(&[], 0.05),
            Err(GateError::EmptyNegatives)
        );
    }

    #[test]
    fn classify_boundary_is_strict() {
        let gate = Gate::new(Ranker::Entropy, 1.25);
        assert_eq!(gate.classify(1.25), GateDecision::Accept);
        assert_eq!(gate.classify(1.25 + 1e-12), GateDecision::Reject);
        assert_eq!(gate.classify(0.0), GateDecision::Accept);
    }

    #[test]
    fn training_rejection_count_matches_order_statistics() {
        // With distinct scores, exactly n1 - v of the training negatives
        // exceed the threshold.
        let scores: Vec<f64> = (0..50).map(|i| (i as f64).sin() + i as f64 * 0.01).collect();
        let alpha = 0.1;
        let v = order_statistic_rank(scores.len(), alpha).unwrap();
        let threshold = order_statistic_threshold(&scores, alpha).unwrap();
        let gate = Gate::new(Ranker::Entropy, threshold);
        let rejected = scores.iter().filter(|&&s| !gate.accepts(s)).count();
        assert_eq!(rejected, scores.len() - v);
        let bound = alpha * (scores.len() as f64 + 1.0) / scores.len() as f64;
        assert!(rejected as f64 / scores.len() as f64 <= bound);
    }

    #[test]
    fn pava_leaves_monotone_input_alone() {
        let y = [0.9, 0.8, 0.8, 0.3];
        let w = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(pava_decreasing(&y, &w), y.to_vec());
    }

    #[test]
    fn pava_pools_single_violation() {
        let y = [0.9, 0.95, 0.8];
        let w = [1.0, 1.0, 1.0];
        let fit = pava_decreasing(&y, &w);
        assert!((fit[0] - 0.925).abs() < 1e-15);
        assert!((fit[1] - 0.925).abs() < 1e-15);
        assert!((fit[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn pava_respects_weights() {
        let y = [0.2, 0.8];
        let w = [3.0, 1.0];
        let fit = pava_increasing(&y, &w);
        assert_eq!(fit, vec![0.2, 0.8]);
        let fit = pava_increasing(&[0.8, 0.2], &w);
        let pooled = (0.8 * 3.0 + 0.2) / 4.0;
        assert!((fit[0] - pooled).abs() < 1e-15);
        assert!((fit[1] - pooled).abs() < 1e-15);
    }

    #[test]
    fn transform_recovers_decreasing_accuracy_profile() {
        // Accuracy falls linearly in the score; the cumulative-accuracy knots
        // must track the true coverage accuracy within a few points.
        let n = 10_000;
        let mut state = 123u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut scores = Vec::with_capacity(n);
        let mut correct = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rnd();
            scores.push(s);
            correct.push(rnd() < 1.0 - 0.5 * s);
        }
        let fit = fit_coverage_transform(&scores, &correct, 10).unwrap();
        for knot in &fit.knots {
            // True coverage accuracy at threshold s: 1 - s/4 (mean of the
            // linear rate over [0, s]).
            let truth = 1.0 - knot.score / 4.0;
            assert!(
                (knot.value - truth).abs() < 0.05,
                "knot {:?} vs truth {}",
                knot,
                truth
            );
        }
    }

    #[test]
    fn invert_step_examples() {
        let fit = IsotonicFit {
            knots: vec![
                Knot { score: 1.0, value: 0.99 },
                Knot { score: 2.0, value: 0.90 },
                Knot { score: 3.0, value: 0.80 },
            ],
            bins: 3,
        };
        assert_eq!(invert_transform(&fit, 0.85).unwrap(), 2.0);
        // Vacuous constraint accepts out to the last knot.
        assert_eq!(invert_transform(&fit, 0.5).unwrap(), 3.0);
        assert_eq!(
            invert_transform(&fit, 0.995),
            Err(GateError::UnreachableAccuracy { beta: 0.995, max: 0.99 })
        );
    }

    #[test]
    fn invert_linear_interpolates_between_knots() {
        let fit = IsotonicFit {
            knots: vec![
                Knot { score: 1.0, value: 0.9 },
                Knot { score: 2.0, value: 0.7 },
            ],
            bins: 2,
        };
        let s = invert_transform_with(&fit, 0.8, Inversion::Linear).unwrap();
        assert!((s - 1.5).abs() < 1e-12);
        assert_eq!(invert_transform_with(&fit, 0.6, Inversion::Linear).unwrap(), 2.0);
    }

    #[test]
    fn inversion_is_monotone_in_beta() {
        let fit = IsotonicFit {
            knots: vec![
                Knot { score: 0.5, value: 0.95 },
                Knot { score: 1.0, value: 0.95 },
                Knot { score: 1.5, value: 0.80 },
                Knot { score: 2.5, value: 0.60 },
            ],
            bins: 4,
        };
        let mut last = f64::INFINITY;
        for beta in [0.55, 0.6, 0.7, 0.8, 0.9, 0.95] {
            let s = invert_transform(&fit, beta).unwrap();
            assert!(s <= last, "threshold must shrink as beta grows");
            last = s;
        }
    }

    /// Exhaustive oracle: least-squares non-increasing fit by enumerating
    /// every contiguous block partition.
    fn brute_force_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
        let n = values.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        // Bit i set = a block boundary after position i.
        for mask in 0..(1u32 << (n - 1)) {
            let mut fit = Vec::with_capacity(n);
            let mut start = 0;
            let mut means = Vec::new();
            for end in 0..n {
                let boundary = end == n - 1 || (mask >> end) & 1 == 1;
                if boundary {
                    let w: f64 = weights[start..=end].iter().sum();
                    let m: f64 = values[start..=end]
                        .iter()
                        .zip(&weights[start..=end])
                        .map(|(v, w)| v * w)
                        .sum::<f64>()
                        / w;
                    means.push(m);
                    for _ in start..=end {
                        fit.push(m);
                    }
                    start = end + 1;
                }
            }
            if means.windows(2).any(|p| p[0] < p[1] - 1e-12) {
                continue;
            }
            let sse: f64 = values
                .iter()
                .zip(&fit)
                .zip(weights)
                .map(|((v, f), w)| w * (v - f) * (v - f))
                .sum();
            if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                best = Some((sse, fit));
            }
        }
        best.unwrap().1
    }

    proptest! {
        #[test]
        fn pava_matches_exhaustive_oracle(
            values in proptest::collection::vec(0.0_f64..1.0, 2..7),
            raw_weights in proptest::collection::vec(0.5_f64..5.0, 7),
        ) {
            let weights = &raw_weights[..values.len()];
            let fast = pava_decreasing(&values, weights);
            let slow = brute_force_decreasing(&values, weights);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", fast, slow);
            }
        }

        #[test]
        fn order_statistic_gate_is_monotone_transform_invariant(
            raw in proptest::collection::vec(-4.0_f64..4.0, 21..60),
            // Kept certifiable: alpha >= 1/(n1+1) for every drawn size.
            alpha in 0.1_f64..0.4,
        ) {
            // m(s) = exp(s) + s, strictly increasing.
            let m = |s: f64| s.exp() + s;
            let t1 = order_statistic_threshold(&raw, alpha).unwrap();
            let mapped: Vec<f64> = raw.iter().map(|&s| m(s)).collect();
            let t2 = order_statistic_threshold(&mapped, alpha).unwrap();
            for &s in &raw {
                prop_assert_eq!(s <= t1, m(s) <= t2);
            }
        }

        #[test]
        fn coverage_gate_is_affine_transform_invariant(
            seed in 1u64..300,
            scale in 0.1_f64..10.0,
            shift in -5.0_f64..5.0,
            beta in 0.4_f64..0.7,
        ) {
            let mut state = seed;
            let mut rnd = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let n = 200;
            let mut scores = Vec::with_capacity(n);
            let mut correct = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rnd();
                scores.push(s);
                correct.push(rnd() < 1.0 - 0.6 * s);
            }
            let fit1 = fit_coverage_transform(&scores, &correct, 5).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|&s| scale * s + shift).collect();
            let fit2 = fit_coverage_transform(&mapped, &correct, 5).unwrap();
            match (invert_transform(&fit1, beta), invert_transform(&fit2, beta)) {
                (Ok(r1), Ok(r2)) => {
                    for (s, ms) in scores.iter().zip(&mapped) {
                        prop_assert_eq!(*s <= r1, *ms <= r2 + 1e-12 * scale.max(1.0));
                    }
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "divergent outcomes {:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn fitted_values_never_increase(
            seed in 1u64..300,
            b in 2usize..12,
        ) {
            let mut state = seed;
            let mut rnd = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let n = 60;
            let scores: Vec<f64> = (0..n).map(|_| rnd()).collect();
            let correct: Vec<bool> = (0..n).map(|_| rnd() < 0.7).collect();
            let fit = fit_coverage_transform(&scores, &correct, b).unwrap();
            for pair in fit.knots.windows(2) {
                prop_assert!(pair[0].value >= pair[1].value - 1e-12);
                prop_assert!(pair[0].score < pair[1].score);
            }
            for knot in &fit.knots {
                prop_assert!((0.0..=1.0).contains(&knot.value));
            }
        }
    }
}
