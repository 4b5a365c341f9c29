//! Base calibration maps: the map abstraction, identity, and temperature
//! scaling fitted by negative-log-likelihood minimization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{Dataset, ProbVector};

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("probabilities must be strictly positive to recover logits")]
    NonPositiveProbability,
    #[error("class count mismatch: model expects {expected}, input has {got}")]
    ClassCountMismatch { expected: usize, got: usize },
}

/// A calibration map transforms probability vectors into probability
/// vectors. `accuracy_preserving` marks maps whose output argmax set always
/// equals the input argmax set.
pub trait CalibrationMap {
    fn apply(&self, p: &ProbVector) -> Result<ProbVector, CalibError>;
    fn accuracy_preserving(&self) -> bool;
}

/// Clamp range for the fitted temperature.
pub const TEMPERATURE_MIN: f64 = 1e-2;
pub const TEMPERATURE_MAX: f64 = 1e2;

/// Absolute convergence tolerance of the scalar search, in log-temperature.
const LOG_T_TOLERANCE: f64 = 1e-6;
/// The search interval is subdivided into this many brackets, each searched
/// independently; the best minimizer wins.
const SEARCH_BRACKETS: usize = 8;

/// Temperature scaling: output proportional to `p^(1/T)` entry-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    #[serde(rename = "T")]
    temperature: f64,
    k: usize,
}

impl TemperatureModel {
    pub fn new(temperature: f64, k: usize) -> Self {
        assert!(
            (TEMPERATURE_MIN..=TEMPERATURE_MAX).contains(&temperature),
            "temperature outside clamp range"
        );
        Self { temperature, k }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl CalibrationMap for TemperatureModel {
    /// Rescale in log space: `softmax(ln p / T)`. Requires strictly positive
    /// entries; preserves the argmax set for every `T > 0`.
    fn apply(&self, p: &ProbVector) -> Result<ProbVector, CalibError> {
        if p.k() != self.k {
            return Err(CalibError::ClassCountMismatch {
                expected: self.k,
                got: p.k(),
            });
        }
        apply_temperature(self.temperature, p)
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

fn apply_temperature(temperature: f64, p: &ProbVector) -> Result<ProbVector, CalibError> {
    if p.probs().iter().any(|&v| v <= 0.0) {
        return Err(CalibError::NonPositiveProbability);
    }
    let scaled: Vec<f64> = p.probs().iter().map(|&v| v.ln() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector::from_normalized_unchecked(
        exps.iter().map(|e| e / sum).collect(),
    ))
}

/// The serializable closed set of base calibrators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum BaseCalibrator {
    #[serde(rename = "temperature")]
    Temperature(TemperatureModel),
    #[serde(rename = "identity")]
    Identity,
}

impl CalibrationMap for BaseCalibrator {
    fn apply(&self, p: &ProbVector) -> Result<ProbVector, CalibError> {
        match self {
            BaseCalibrator::Temperature(m) => m.apply(p),
            BaseCalibrator::Identity => Ok(p.clone()),
        }
    }

    fn accuracy_preserving(&self) -> bool {
        match self {
            BaseCalibrator::Temperature(_) => true,
            BaseCalibrator::Identity => true,
        }
    }
}

/// The do-nothing calibration map.
pub fn identity_calibrator() -> BaseCalibrator {
    BaseCalibrator::Identity
}

/// Fit a temperature by minimizing the mean negative log-likelihood of
/// `softmax(ln p / T)` over the dataset.
///
/// The minimizer is found by golden-section search on `ln T` over the clamp
/// range, restarted in [`SEARCH_BRACKETS`] equal sub-intervals with the best
/// result kept; the interval endpoints are also candidates so the clamp is
/// attained exactly when the likelihood is monotone.
pub fn fit_temperature(data: &Dataset) -> Result<TemperatureModel, CalibError> {
    let k = data.k();
    let n = data.len();
    // Shifted logits: ln p minus the per-sample max, plus the label entry.
    let mut shifted = Vec::with_capacity(n * k);
    let mut label_shifted = Vec::with_capacity(n);
    for s in data.iter() {
        if s.prob.probs().iter().any(|&v| v <= 0.0) {
            return Err(CalibError::NonPositiveProbability);
        }
        let logs: Vec<f64> = s.prob.probs().iter().map(|v| v.ln()).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for l in &logs {
            shifted.push(l - max);
        }
        label_shifted.push(logs[s.label] - max);
    }

    let nll = |log_t: f64| -> f64 {
        let inv_t = (-log_t).exp();
        let mut total = 0.0;
        for i in 0..n {
            let row = &shifted[i * k..(i + 1) * k];
            let mut sum = 0.0;
            for d in row {
                sum += (d * inv_t).exp();
            }
            total += sum.ln() - label_shifted[i] * inv_t;
        }
        total / n as f64
    };

    let lo = TEMPERATURE_MIN.ln();
    let hi = TEMPERATURE_MAX.ln();
    let mut best = (lo, nll(lo));
    let hi_val = nll(hi);
    if hi_val < best.1 {
        best = (hi, hi_val);
    }
    for bracket in 0..SEARCH_BRACKETS {
        let a = lo + (hi - lo) * bracket as f64 / SEARCH_BRACKETS as f64;
        let b = lo + (hi - lo) * (bracket + 1) as f64 / SEARCH_BRACKETS as f64;
        let (x, v) = golden_section_min(&nll, a, b, LOG_T_TOLERANCE);
        if v < best.1 {
            best = (x, v);
        }
    }
    // Snap exp-of-log roundoff back onto the exact clamp bounds.
    let mut temperature = best.0.exp();
    if (temperature - TEMPERATURE_MIN).abs() <= TEMPERATURE_MIN * 1e-9 {
        temperature = TEMPERATURE_MIN;
    } else if (temperature - TEMPERATURE_MAX).abs() <= TEMPERATURE_MAX * 1e-9 {
        temperature = TEMPERATURE_MAX;
    }
    Ok(TemperatureModel {
        temperature: temperature.clamp(TEMPERATURE_MIN, TEMPERATURE_MAX),
        k,
    })
}

/// Golden-section minimization of a unimodal-ish scalar function on `[a, b]`
/// down to interval width `tol`; returns the midpoint and its value.
fn golden_section_min<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}
