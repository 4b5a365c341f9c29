//! Analytic guarantee formulas — exact binomial tails, Gaussian Chernoff
//! bounds, calibration-error lower bounds, the naive-map identity — plus the
//! empirical gate metrics and the Monte Carlo harness that checks the
//! guarantees against synthetic data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{order_statistic_rank, Gate, GateError};
use crate::model::{
    default_transform_bins, fit_coverage, fit_miscoverage, gate_split_size, MetaCalError,
};
use crate::prob::{Dataset, TieBreakPolicy};
use crate::ranking::Ranker;
use crate::rng::derive_seed;
use crate::synthgen::{generate, GeneratorSpec, PopulationPool};

/// Empirical gate/constraint metrics over a dataset.
///
/// Correctness refers to the original classifier's predictions; rates with
/// an empty denominator are reported as `None` rather than failing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateMetrics {
    /// Type I error: share of correct predictions that get rejected.
    pub type1: Option<f64>,
    /// Type II error: share of incorrect predictions that get accepted.
    pub type2: Option<f64>,
    /// Miscoverage rate; identical to `type1` by construction.
    pub miscoverage: Option<f64>,
    /// Coverage accuracy: precision of the accept decision.
    pub coverage_accuracy: Option<f64>,
    /// Plain accuracy of the classifier on the dataset.
    pub accuracy: f64,
    pub accepted_count: usize,
    pub rejected_count: usize,
}

/// Evaluate a gate over a dataset. Correctness contributions are fractional
/// under the expected-value tie policy and 0/1 otherwise.
pub fn gate_metrics(gate: &Gate, data: &Dataset, policy: &TieBreakPolicy) -> GateMetrics {
    let n = data.len() as f64;
    let mut correct = 0.0;
    let mut rejected_correct = 0.0;
    let mut accepted_correct = 0.0;
    let mut accepted_incorrect = 0.0;
    let mut accepted_count = 0usize;
    for s in data.iter() {
        let c = s.prob.correctness_score(s.label, policy);
        let accepted = gate.accepts(gate.ranker.score(&s.prob));
        correct += c;
        if accepted {
            accepted_count += 1;
            accepted_correct += c;
            accepted_incorrect += 1.0 - c;
        } else {
            rejected_correct += c;
        }
    }
    let incorrect = n - correct;
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    let type1 = ratio(rejected_correct, correct);
    GateMetrics {
        type1,
        type2: ratio(accepted_incorrect, incorrect),
        miscoverage: type1,
        coverage_accuracy: ratio(accepted_correct, accepted_count as f64),
        accuracy: correct / n,
        accepted_count,
        rejected_count: data.len() - accepted_count,
    }
}

/// Exact probability that the population miscoverage of an order-statistic
/// gate exceeds `alpha`:
/// `sum_{j=v}^{n1} C(n1, j) (1-alpha)^j alpha^(n1-j)` with
/// `v = ceil((n1+1)(1-alpha))`. Binomial coefficients are accumulated in the
/// log domain.
pub fn miscoverage_tail(n1: usize, alpha: f64) -> Result<f64, GateError> {
    let v = order_statistic_rank(n1, alpha)?;
    let mut ln_fact = Vec::with_capacity(n1 + 1);
    ln_fact.push(0.0f64);
    for i in 1..=n1 {
        ln_fact.push(ln_fact[i - 1] + (i as f64).ln());
    }
    let ln_p = (1.0 - alpha).ln();
    let ln_q = alpha.ln();
    let mut total = 0.0;
    for j in v..=n1 {
        let ln_term = ln_fact[n1] - ln_fact[j] - ln_fact[n1 - j]
            + j as f64 * ln_p
            + (n1 - j) as f64 * ln_q;
        total += ln_term.exp();
    }
    Ok(total.min(1.0))
}

/// A probability bound reported both raw and clamped into `[0, 1]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbabilityBound {
    pub raw: f64,
    pub clamped: f64,
}

impl ProbabilityBound {
    fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            clamped: raw.clamp(0.0, 1.0),
        }
    }
}

/// Gaussian Chernoff tail bound `2 exp(-delta^2 / (2 sigma^2))` on the
/// deviation of an approximately normal rate from its mean.
pub fn gaussian_chernoff(delta: f64, sigma2: f64) -> ProbabilityBound {
    if sigma2 <= 0.0 {
        return ProbabilityBound::from_raw(if delta > 0.0 { 0.0 } else { 2.0 });
    }
    ProbabilityBound::from_raw(2.0 * (-delta * delta / (2.0 * sigma2)).exp())
}

/// Deviation bound for the empirical coverage accuracy around its target:
/// `2 exp(-m1 delta^2 / (2 beta (1 - beta)))`.
pub fn coverage_deviation_bound(delta: f64, beta: f64, m1: usize) -> ProbabilityBound {
    gaussian_chernoff(delta, beta * (1.0 - beta) / m1 as f64)
}

/// Lower bound on the supremum binned calibration error achievable by any
/// accuracy-preserving map: `(1 - accuracy) / k`.
pub fn ece_lower_bound_acc_preserving(accuracy: f64, k: usize) -> f64 {
    (1.0 - accuracy) / k as f64
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetaCalBound {
    /// Accepted-mass factor `(1 - R0) acc + R1 (1 - acc)`.
    pub w: f64,
    pub bound: f64,
}

/// Lower bound for the composed map: `w (1 - accuracy) / k`. Equals the
/// accuracy-preserving bound at the degenerate accept-everything gate.
pub fn metacal_lower_bound(accuracy: f64, r0: f64, r1: f64, k: usize) -> MetaCalBound {
    let w = (1.0 - r0) * accuracy + r1 * (1.0 - accuracy);
    MetaCalBound {
        w,
        bound: w * ece_lower_bound_acc_preserving(accuracy, k),
    }
}

/// The exact supremum binned calibration error of the naive one-hot/uniform
/// construction: `R1 * (1 - accuracy)`.
///
/// The binned estimator reproduces this value only under schemes whose edges
/// separate the two confidence atoms `1/k` and `1`; a scheme that mixes them
/// averages the two groups and lands below the identity.
pub fn naive_ece_identity(r1: f64, accuracy: f64) -> f64 {
    r1 * (1.0 - accuracy)
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid harness config: {0}")]
    InvalidConfig(String),
}

fn default_pool() -> usize {
    1_000_000
}

/// Configuration of the Monte Carlo verification harness: generator shape,
/// fit/eval sizes, exactly one constraint target, run count and master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub k: usize,
    pub logit_scale: f64,
    #[serde(rename = "tdist")]
    pub distortion_temperature: f64,
    pub n_fit: usize,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<f64>,
    /// Uniform-mass bins for the coverage transform; defaults per split size.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bins: Option<usize>,
    pub runs: usize,
    pub seed: u64,
    /// Size of the label-noise-free reference pool used as the population
    /// proxy.
    #[serde(default = "default_pool")]
    pub pool: usize,
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        let err = |m: &str| Err(VerifyError::InvalidConfig(m.into()));
        match (self.alpha, self.beta) {
            (Some(_), Some(_)) | (None, None) => {
                return err("exactly one of alpha and beta must be set")
            }
            (Some(a), None) if !(a > 0.0 && a < 1.0) => return err("alpha must lie in (0, 1)"),
            (None, Some(b)) if !(b > 0.0 && b < 1.0) => return err("beta must lie in (0, 1)"),
            _ => {}
        }
        if self.runs < 2 {
            return err("need at least 2 runs");
        }
        if self.k < 2 {
            return err("class count must be at least 2");
        }
        if self.n_fit == 0 || self.n_eval == 0 {
            return err("fit and eval sizes must be positive");
        }
        if self.pool == 0 {
            return err("pool size must be positive");
        }
        GeneratorSpec {
            k: self.k,
            n: self.n_fit,
            logit_scale: self.logit_scale,
            distortion_temperature: self.distortion_temperature,
            seed: 0,
        }
        .validate()
        .map_err(VerifyError::InvalidConfig)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Gate-training negatives (miscoverage mode only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n1: Option<usize>,
    /// Held-out denominator: correct predictions (miscoverage) or accepted
    /// samples (coverage).
    pub m1: usize,
    pub holdout: f64,
    pub population: f64,
    /// Exact exceedance probability for this run's gate size.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tail: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaBound {
    pub delta: f64,
    pub bound: ProbabilityBound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySummary {
    pub target: f64,
    pub mean_holdout: f64,
    pub sd_holdout: f64,
    pub mean_population: f64,
    pub sd_population: f64,
    /// Share of runs whose population-proxy rate exceeds alpha
    /// (miscoverage mode).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exceedance_frequency: Option<f64>,
    /// Mean of the per-run exact tails; the analytic prediction of the
    /// exceedance frequency.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_tail: Option<f64>,
    /// Chernoff/deviation bounds at a small grid of deviations, evaluated at
    /// the mean population rate and mean held-out denominator.
    pub deviation_bounds: Vec<DeltaBound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub mode: String,
    pub runs: usize,
    pub completed: usize,
    pub per_run: Vec<RunRecord>,
    pub failures: Vec<FailedRun>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary: Option<VerifySummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn error_code(err: &MetaCalError) -> &'static str {
    match err {
        MetaCalError::NoCorrectPredictions => "NO_CORRECT_PREDICTIONS",
        MetaCalError::EmptyAcceptedTrainingSet => "EMPTY_ACCEPTED_TRAINING_SET",
        MetaCalError::ClassCountMismatch { .. } => "CLASS_COUNT_MISMATCH",
        MetaCalError::BaseNotAccuracyPreserving => "BASE_NOT_ACCURACY_PRESERVING",
        MetaCalError::Gate(GateError::ToleranceTooSmall { .. }) => "TOLERANCE_TOO_SMALL",
        MetaCalError::Gate(GateError::EmptyNegatives) => "NO_CORRECT_PREDICTIONS",
        MetaCalError::Gate(GateError::InvalidTolerance { .. }) => "INVALID_TOLERANCE",
        MetaCalError::Gate(GateError::TooFewValues { .. }) => "TOO_FEW_VALUES",
        MetaCalError::Gate(GateError::UnreachableAccuracy { .. }) => "UNREACHABLE_ACCURACY",
        MetaCalError::Calibration(_) => "NON_POSITIVE_PROBABILITY",
    }
}

/// Run the harness: for each run, draw fresh fit/eval datasets, fit the
/// constrained model, and record the held-out rate next to the pool-based
/// population proxy and the analytic predictions. Failed runs are recorded
/// and skipped.
pub fn monte_carlo_verify(config: &VerifyConfig) -> Result<VerifyReport, VerifyError> {
    config.validate()?;
    let miscoverage_mode = config.alpha.is_some();
    let pool = PopulationPool::generate(
        config.k,
        config.logit_scale,
        config.distortion_temperature,
        config.pool,
        derive_seed(config.seed, u64::MAX),
    );
    let policy_of = |seed: u64| TieBreakPolicy::SeededUniform { seed };

    let mut per_run = Vec::new();
    let mut failures = Vec::new();
    for run in 0..config.runs {
        let run_seed = derive_seed(config.seed, run as u64);
        let fit_data = generate(&GeneratorSpec {
            k: config.k,
            n: config.n_fit,
            logit_scale: config.logit_scale,
            distortion_temperature: config.distortion_temperature,
            seed: derive_seed(run_seed, 0),
        })
        .0;
        let eval_data = generate(&GeneratorSpec {
            k: config.k,
            n: config.n_eval,
            logit_scale: config.logit_scale,
            distortion_temperature: config.distortion_temperature,
            seed: derive_seed(run_seed, 1),
        })
        .0;

        let fitted = if let Some(alpha) = config.alpha {
            fit_miscoverage(&fit_data, alpha, Ranker::Entropy, run_seed)
        } else {
            let beta = config.beta.expect("validated");
            let b = config
                .bins
                .unwrap_or_else(|| default_transform_bins(gate_split_size(config.n_fit)));
            fit_coverage(&fit_data, beta, Ranker::Entropy, b, run_seed)
        };
        let model = match fitted {
            Ok(m) => m,
            Err(e) => {
                failures.push(FailedRun {
                    run,
                    code: error_code(&e).into(),
                    message: e.to_string(),
                });
                continue;
            }
        };

        let metrics = gate_metrics(model.gate(), &eval_data, &policy_of(run_seed));
        let threshold = model.gate().threshold;
        let record = if miscoverage_mode {
            let alpha = config.alpha.expect("validated");
            let n1 = model.n1().expect("miscoverage fit records n1");
            let holdout = match metrics.miscoverage {
                Some(v) => v,
                None => {
                    failures.push(FailedRun {
                        run,
                        code: "UNDEFINED_RATE".into(),
                        message: "no correct predictions in the eval split".into(),
                    });
                    continue;
                }
            };
            let correct_count =
                (metrics.accuracy * eval_data.len() as f64).round() as usize;
            RunRecord {
                run,
                seed: run_seed,
                threshold,
                n1: Some(n1),
                m1: correct_count,
                holdout,
                population: pool.miscoverage_at(threshold),
                tail: Some(miscoverage_tail(n1, alpha).expect("rank fit succeeded")),
            }
        } else {
            let holdout = match metrics.coverage_accuracy {
                Some(v) => v,
                None => {
                    failures.push(FailedRun {
                        run,
                        code: "UNDEFINED_RATE".into(),
                        message: "the gate accepted nothing in the eval split".into(),
                    });
                    continue;
                }
            };
            let population = match pool.coverage_accuracy_at(threshold) {
                Some(v) => v,
                None => {
                    failures.push(FailedRun {
                        run,
                        code: "UNDEFINED_RATE".into(),
                        message: "the gate accepted nothing in the reference pool".into(),
                    });
                    continue;
                }
            };
            RunRecord {
                run,
                seed: run_seed,
                threshold,
                n1: None,
                m1: metrics.accepted_count,
                holdout,
                population,
                tail: None,
            }
        };
        per_run.push(record);
    }

    let summary = if per_run.is_empty() {
        None
    } else {
        let holdouts: Vec<f64> = per_run.iter().map(|r| r.holdout).collect();
        let pops: Vec<f64> = per_run.iter().map(|r| r.population).collect();
        let mean_m1 = per_run.iter().map(|r| r.m1 as f64).sum::<f64>() / per_run.len() as f64;
        let target = config.alpha.or(config.beta).expect("validated");
        let mean_population = mean(&pops);
        let deltas = [0.01, 0.02, 0.05];
        let deviation_bounds = deltas
            .iter()
            .map(|&delta| DeltaBound {
                delta,
                bound: if miscoverage_mode {
                    let sigma2 = mean_population * (1.0 - mean_population) / mean_m1;
                    gaussian_chernoff(delta, sigma2)
                } else {
                    coverage_deviation_bound(delta, target, mean_m1.round() as usize)
                },
            })
            .collect();
        let (exceedance_frequency, mean_tail) = if miscoverage_mode {
            let alpha = target;
            let exceed =
                pops.iter().filter(|&&p| p > alpha).count() as f64 / per_run.len() as f64;
            let tails: Vec<f64> = per_run.iter().filter_map(|r| r.tail).collect();
            (Some(exceed), Some(mean(&tails)))
        } else {
            (None, None)
        };
        Some(VerifySummary {
            target,
            mean_holdout: mean(&holdouts),
            sd_holdout: sample_sd(&holdouts),
            mean_population,
            sd_population: sample_sd(&pops),
            exceedance_frequency,
            mean_tail,
            deviation_bounds,
        })
    };

    Ok(VerifyReport {
        mode: if miscoverage_mode { "miscoverage" } else { "coverage" }.into(),
        runs: config.runs,
        completed: per_run.len(),
        per_run,
        failures,
        summary,
    })
}
