//! Synthetic miscalibrated-classifier generator with known ground truth.
//!
//! Each sample draws latent logits `z ~ Normal(0, logit_scale^2)^k`; the true
//! conditional distribution is `softmax(z)`, the label is drawn from it, and
//! the emitted model output is `softmax(z / T_d)`. A distortion temperature
//! below 1 sharpens the output into the overconfident regime typical of
//! neural networks; `T_d = 1` emits a perfectly calibrated model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::prob::{Dataset, LabeledSample, ProbVector};
use crate::ranking::entropy_score;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub k: usize,
    pub n: usize,
    pub logit_scale: f64,
    #[serde(rename = "tdist")]
    pub distortion_temperature: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.k < 2 {
            return Err(format!("class count {} is below 2", self.k));
        }
        if self.n == 0 {
            return Err("sample count must be positive".into());
        }
        if self.logit_scale <= 0.0 || self.logit_scale.is_nan() {
            return Err(format!("logit scale {} must be positive", self.logit_scale));
        }
        if self.distortion_temperature <= 0.0 || self.distortion_temperature.is_nan() {
            return Err(format!(
                "distortion temperature {} must be positive",
                self.distortion_temperature
            ));
        }
        Ok(())
    }
}

/// One point of the sampled accuracy-vs-entropy profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub entropy: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Label-noise-free ground truth of a generated dataset: the true
/// conditional distribution per sample, the plug-in population accuracy
/// (mean of `max p*`), and the accuracy-vs-entropy profile over a
/// uniform-mass entropy grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub population_accuracy: f64,
    pub profile: Vec<ProfilePoint>,
    pub p_star: Vec<Vec<f64>>,
}

const PROFILE_BINS: usize = 20;

/// Generate a dataset and its ground-truth record. Randomness is derived
/// per sample index from the spec seed, so regeneration is bit-identical
/// and order-independent.
pub fn generate(spec: &GeneratorSpec) -> (Dataset, GroundTruth) {
    spec.validate().expect("valid generator spec");
    let mut samples = Vec::with_capacity(spec.n);
    let mut p_star = Vec::with_capacity(spec.n);
    let mut entropies = Vec::with_capacity(spec.n);
    let mut star_max = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let (output, star, label) = draw_sample(spec, i);
        entropies.push(entropy_score(&output));
        star_max.push(star.confidence());
        p_star.push(star.probs().to_vec());
        samples.push(LabeledSample::new(output, label).expect("label in range"));
    }
    let population_accuracy = star_max.iter().sum::<f64>() / spec.n as f64;
    let profile = entropy_profile(&entropies, &star_max);
    (
        Dataset::new(samples).expect("n >= 1"),
        GroundTruth {
            population_accuracy,
            profile,
            p_star,
        },
    )
}

fn draw_sample(spec: &GeneratorSpec, index: usize) -> (ProbVector, ProbVector, usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let z: Vec<f64> = (0..spec.k)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * spec.logit_scale
        })
        .collect();
    let star = ProbVector::from_logits(&z).expect("finite logits");
    let distorted: Vec<f64> = z.iter().map(|v| v / spec.distortion_temperature).collect();
    let output = ProbVector::from_logits(&distorted).expect("finite logits");
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut label = spec.k - 1;
    for (j, p) in star.probs().iter().enumerate() {
        cum += p;
        if u < cum {
            label = j;
            break;
        }
    }
    (output, star, label)
}

/// Mean true accuracy (`max p*`) per uniform-mass entropy bin.
fn entropy_profile(entropies: &[f64], star_max: &[f64]) -> Vec<ProfilePoint> {
    let n = entropies.len();
    let bins = PROFILE_BINS.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| entropies[i].total_cmp(&entropies[j]));
    let cuts = crate::binning::uniform_mass_cuts(n, bins);
    let mut profile = Vec::with_capacity(bins);
    for j in 0..bins {
        let slice = &order[cuts[j]..cuts[j + 1]];
        if slice.is_empty() {
            continue;
        }
        let entropy = slice.iter().map(|&i| entropies[i]).sum::<f64>() / slice.len() as f64;
        let accuracy = slice.iter().map(|&i| star_max[i]).sum::<f64>() / slice.len() as f64;
        profile.push(ProfilePoint {
            entropy,
            accuracy,
            count: slice.len(),
        });
    }
    profile
}

/// A large label-noise-free reference pool for population-level gate
/// quantities. Sorting by score once makes per-threshold queries O(log m):
/// the plug-in population miscoverage weights each pooled sample by its
/// probability of being correct (`max p*`) instead of drawing a label.
#[derive(Debug, Clone)]
pub struct PopulationPool {
    scores: Vec<f64>,
    weight_prefix: Vec<f64>,
    total_weight: f64,
}

impl PopulationPool {
    pub fn generate(k: usize, logit_scale: f64, tdist: f64, m: usize, seed: u64) -> Self {
        let spec = GeneratorSpec {
            k,
            n: m,
            logit_scale,
            distortion_temperature: tdist,
            seed,
        };
        spec.validate().expect("valid pool spec");
        let mut pairs: Vec<(f64, f64)> = (0..m)
            .map(|i| {
                let (output, star, _) = draw_sample(&spec, i);
                (entropy_score(&output), star.confidence())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut weight_prefix = Vec::with_capacity(m + 1);
        weight_prefix.push(0.0);
        let mut acc = 0.0;
        for (_, w) in &pairs {
            acc += w;
            weight_prefix.push(acc);
        }
        Self {
            scores: pairs.into_iter().map(|(s, _)| s).collect(),
            weight_prefix,
            total_weight: acc,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// P(score > threshold | correct): the population miscoverage of a gate
    /// at this threshold.
    pub fn miscoverage_at(&self, threshold: f64) -> f64 {
        let i = self.scores.partition_point(|&s| s <= threshold);
        (self.total_weight - self.weight_prefix[i]) / self.total_weight
    }

    /// P(correct | score <= threshold): the population coverage accuracy of
    /// a gate at this threshold; `None` when nothing is accepted.
    pub fn coverage_accuracy_at(&self, threshold: f64) -> Option<f64> {
        let i = self.scores.partition_point(|&s| s <= threshold);
        if i == 0 {
            None
        } else {
            Some(self.weight_prefix[i] / i as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binning::{binned_ece, BinningScheme};
    use crate::prob::TieBreakPolicy;

    fn spec(n: usize, tdist: f64, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            k: 10,
            n,
            logit_scale: 3.0,
            distortion_temperature: tdist,
            seed,
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let s = spec(500, 0.5, 42);
        let (a, _) = generate(&s);
        let (b, _) = generate(&s);
        assert_eq!(a, b);
        let (c, _) = generate(&spec(500, 0.5, 43));
        assert_ne!(a, c);
    }

    #[test]
    fn outputs_are_valid_probability_vectors() {
        let (data, truth) = generate(&spec(2_000, 0.5, 1));
        for s in data.iter() {
            assert!(ProbVector::validate(s.prob.probs()).is_ok());
        }
        for star in &truth.p_star {
            assert!(ProbVector::validate(star).is_ok());
        }
        assert!(truth.population_accuracy > 0.0 && truth.population_accuracy < 1.0);
    }

    #[test]
    fn calibrated_generator_has_small_ece() {
        let (data, _) = generate(&spec(100_000, 1.0, 2));
        let scheme = BinningScheme::equal_width(15).unwrap();
        let report = binned_ece(&data, &scheme, &TieBreakPolicy::LowestIndex);
        assert!(report.ece < 0.01, "calibrated ECE = {}", report.ece);
    }

    #[test]
    fn sharpened_generator_is_overconfident() {
        let (data, _) = generate(&spec(100_000, 0.5, 2));
        let scheme = BinningScheme::equal_width(15).unwrap();
        let report = binned_ece(&data, &scheme, &TieBreakPolicy::LowestIndex);
        assert!(report.ece > 0.05, "distorted ECE = {}", report.ece);
    }

    #[test]
    fn accuracy_profile_is_monotone_in_entropy() {
        let (_, truth) = generate(&spec(100_000, 0.5, 3));
        for pair in truth.profile.windows(2) {
            assert!(
                pair[1].accuracy <= pair[0].accuracy + 0.03,
                "profile rises: {:?} -> {:?}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn pool_quantities_are_coherent() {
        let pool = PopulationPool::generate(10, 3.0, 0.5, 50_000, 9);
        assert_eq!(pool.len(), 50_000);
        // Thresholds below/above the score range give the extremes.
        assert!((pool.miscoverage_at(f64::NEG_INFINITY) - 1.0).abs() < 1e-12);
        assert!(pool.miscoverage_at(f64::INFINITY).abs() < 1e-12);
        assert_eq!(pool.coverage_accuracy_at(f64::NEG_INFINITY), None);
        // Miscoverage decreases and coverage accuracy decreases in the
        // threshold over the interior.
        let lo = 10.0_f64.ln() * 0.3;
        let hi = 10.0_f64.ln() * 0.8;
        assert!(pool.miscoverage_at(lo) > pool.miscoverage_at(hi));
        assert!(pool.coverage_accuracy_at(lo).unwrap() > pool.coverage_accuracy_at(hi).unwrap());
    }
}
