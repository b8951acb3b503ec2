//! Distances, energy statistics, permutation tests and rank correlation.

mod distance;
mod energy;
mod matrix;
mod permutation;
mod similarity;
mod spearman;

use serde::{Deserialize, Serialize};

pub use distance::{pairwise_distances, DistanceMatrix, DistanceMetric};
pub use energy::{energy_distance, permutation_test_energy, permutation_test_energy_with};
pub use matrix::Matrix;
pub use permutation::PValueEstimator;
pub use similarity::{
    build_similarity_distributions, emd_1d, energy_1d, sim1d_test, sim1d_test_with,
    SimilarityDistributions,
};
pub use spearman::{average_ranks, spearman_rank};

use crate::error::{Error, Result};

/// Which statistic measures the effect of a perturbation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    /// Energy distance between the two embedding clouds.
    #[default]
    EmbeddingEnergy,
    /// Absolute difference of mean similarity between `p0` and `p1`.
    Sim1dMean,
    /// 1-D earth mover's distance between `p0` and `p1`.
    Sim1dEmd,
    /// 1-D energy distance between `p0` and `p1`.
    Sim1dEnergy,
}

impl EffectMode {
    pub fn name(self) -> &'static str {
        match self {
            EffectMode::EmbeddingEnergy => "embedding_energy",
            EffectMode::Sim1dMean => "sim1d_mean",
            EffectMode::Sim1dEmd => "sim1d_emd",
            EffectMode::Sim1dEnergy => "sim1d_energy",
        }
    }

    pub fn is_sim1d(self) -> bool {
        self != EffectMode::EmbeddingEnergy
    }

    pub fn default_permutations(self) -> usize {
        if self.is_sim1d() {
            1000
        } else {
            500
        }
    }
}

impl std::fmt::Display for EffectMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EffectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "embedding_energy" | "energy" => Ok(EffectMode::EmbeddingEnergy),
            "sim1d_mean" | "mean" => Ok(EffectMode::Sim1dMean),
            "sim1d_emd" | "emd" => Ok(EffectMode::Sim1dEmd),
            "sim1d_energy" => Ok(EffectMode::Sim1dEnergy),
            other => Err(Error::Argument(format!("unknown effect mode {other:?}"))),
        }
    }
}

/// Outcome of one two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub effect_size: f64,
    pub p_value: f64,
    pub mode: EffectMode,
    pub metric: DistanceMetric,
    pub permutations: usize,
    pub seed: u64,
}

/// Runs the configured test between baseline embeddings `x` and perturbed
/// embeddings `y`.
pub fn two_sample_test(
    x: &Matrix,
    y: &Matrix,
    mode: EffectMode,
    metric: DistanceMetric,
    permutations: usize,
    seed: u64,
    estimator: PValueEstimator,
) -> Result<TestResult> {
    match mode {
        EffectMode::EmbeddingEnergy => {
            permutation_test_energy_with(x, y, permutations, metric, seed, estimator)
        }
        _ => {
            let dists = build_similarity_distributions(x, y, metric)?;
            let mut r = sim1d_test_with(&dists.p0, &dists.p1, mode, permutations, seed, estimator)?;
            r.metric = metric;
            Ok(r)
        }
    }
}
