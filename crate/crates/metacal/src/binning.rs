//! Binning schemes over confidence values and the binned calibration-error
//! estimator, including the per-sample supremum estimator that dominates
//! every interval binning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{Dataset, TieBreakPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum BinningError {
    #[error("need at least one bin")]
    ZeroBins,
    #[error("{n} values cannot fill {b} bins")]
    TooFewValues { n: usize, b: usize },
    #[error("edges must rise strictly from 0 to 1")]
    InvalidEdges,
}

/// How a scheme's edges were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BinningKind {
    EqualWidth(usize),
    UniformMass(usize),
    PerSample,
    Custom,
}

/// A partition of `[0, 1]` into intervals; every interval is left-open
/// right-closed except the first, which also contains 0. A confidence lying
/// exactly on an edge therefore belongs to the bin on its left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    edges: Vec<f64>,
    kind: BinningKind,
}

impl BinningScheme {
    /// `b` equally spaced bins.
    pub fn equal_width(b: usize) -> Result<Self, BinningError> {
        if b == 0 {
            return Err(BinningError::ZeroBins);
        }
        let edges = (0..=b).map(|i| i as f64 / b as f64).collect();
        Ok(Self {
            edges,
            kind: BinningKind::EqualWidth(b),
        })
    }

    /// Bins holding (nearly) equal numbers of the given confidence values,
    /// with interior edges at midpoints between adjacent order statistics.
    pub fn uniform_mass(confidences: &[f64], b: usize) -> Result<Self, BinningError> {
        let raw = uniform_mass_edges(confidences, b)?;
        let mut edges = vec![0.0];
        for e in &raw[1..raw.len() - 1] {
            if *e > edges[edges.len() - 1] && *e < 1.0 {
                edges.push(*e);
            }
        }
        edges.push(1.0);
        Ok(Self {
            edges,
            kind: BinningKind::UniformMass(b),
        })
    }

    /// The partition that isolates every distinct confidence value in its
    /// own bin; this attains the supremum of the binned estimator over all
    /// interval partitions.
    pub fn per_sample(confidences: &[f64]) -> Self {
        let mut sorted: Vec<f64> = confidences.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
        sorted.dedup();
        let mut edges = vec![0.0];
        for w in sorted.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            if mid > edges[edges.len() - 1] && mid < 1.0 {
                edges.push(mid);
            }
        }
        edges.push(1.0);
        Self {
            edges,
            kind: BinningKind::PerSample,
        }
    }

    /// An arbitrary interval partition of `[0, 1]`.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self, BinningError> {
        if edges.len() < 2 || edges[0] != 0.0 || *edges.last().unwrap() != 1.0 {
            return Err(BinningError::InvalidEdges);
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BinningError::InvalidEdges);
        }
        Ok(Self {
            edges,
            kind: BinningKind::Custom,
        })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn kind(&self) -> &BinningKind {
        &self.kind
    }

    pub fn bin_count(&self) -> usize {
        self.edges.len() - 1
    }

    /// The bin holding a confidence value. Values on an edge go left;
    /// values at or below 0 (resp. above 1) clamp to the outer bins.
    pub fn bin_index(&self, confidence: f64) -> usize {
        let interior = &self.edges[1..self.edges.len() - 1];
        interior.partition_point(|&e| e < confidence)
    }
}

/// Edges over the range of `values` such that each of the `b` bins holds
/// `floor(n/b)` or `ceil(n/b)` values; interior edges sit at midpoints
/// between the adjacent order statistics. The outer edges are the extreme
/// values themselves.
pub fn uniform_mass_edges(values: &[f64], b: usize) -> Result<Vec<f64>, BinningError> {
    if b == 0 {
        return Err(BinningError::ZeroBins);
    }
    let n = values.len();
    if n < b {
        return Err(BinningError::TooFewValues { n, b });
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mut edges = Vec::with_capacity(b + 1);
    edges.push(sorted[0]);
    for cut in uniform_mass_cuts(n, b).iter().skip(1).take(b - 1) {
        edges.push(0.5 * (sorted[cut - 1] + sorted[*cut]));
    }
    edges.push(sorted[n - 1]);
    Ok(edges)
}

/// Rank cut positions `0 = c_0 <= ... <= c_b = n` assigning each bin
/// `floor(n/b)` or `ceil(n/b)` of the sorted values.
pub(crate) fn uniform_mass_cuts(n: usize, b: usize) -> Vec<usize> {
    (0..=b).map(|j| j * n / b).collect()
}

/// Per-bin row of a calibration report. Empty bins keep `None` statistics
/// and contribute nothing to the estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Binned calibration-error report: per-bin statistics plus the weighted
/// total `sum_j (n_j/n) |acc_j - conf_j|`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinReport {
    pub rows: Vec<BinRow>,
    pub ece: f64,
    pub n: usize,
}

/// The binned expected-calibration-error estimator.
pub fn binned_ece(data: &Dataset, scheme: &BinningScheme, policy: &TieBreakPolicy) -> BinReport {
    let b = scheme.bin_count();
    let mut count = vec![0usize; b];
    let mut conf_sum = vec![0.0f64; b];
    let mut corr_sum = vec![0.0f64; b];
    for sample in data.iter() {
        let confidence = sample.prob.confidence();
        let correctness = sample.prob.correctness_score(sample.label, policy);
        let j = scheme.bin_index(confidence);
        count[j] += 1;
        conf_sum[j] += confidence;
        corr_sum[j] += correctness;
    }
    let n = data.len();
    let mut ece = 0.0;
    let mut rows = Vec::with_capacity(b);
    for j in 0..b {
        let (mean_confidence, accuracy) = if count[j] == 0 {
            (None, None)
        } else {
            let conf = conf_sum[j] / count[j] as f64;
            let acc = corr_sum[j] / count[j] as f64;
            ece += count[j] as f64 / n as f64 * (acc - conf).abs();
            (Some(conf), Some(acc))
        };
        rows.push(BinRow {
            lo: scheme.edges()[j],
            hi: scheme.edges()[j + 1],
            count: count[j],
            mean_confidence,
            accuracy,
        });
    }
    BinReport { rows, ece, n }
}

/// Supremum of the binned estimator over all interval binnings: the mean
/// absolute gap between the correctness indicator and the confidence,
/// attained by the partition that isolates every sample.
pub fn sup_binned_ece(data: &Dataset, policy: &TieBreakPolicy) -> f64 {
    let total: f64 = data
        .iter()
        .map(|s| (s.prob.correctness_score(s.label, policy) - s.prob.confidence()).abs())
        .sum();
    total / data.len() as f64
}
