//! Tests on one-dimensional similarity distributions.
//!
//! `p0` holds similarities between distinct baseline responses (each
//! unordered pair once, no self-pairs) and `p1` holds similarities between
//! every baseline and every perturbed response. Under no effect the two
//! multisets share a distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    distance::pairwise_distances,
    permutation::{exceeds, PValueEstimator},
    DistanceMetric, EffectMode, Matrix, TestResult,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistributions {
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
}

pub fn build_similarity_distributions(
    x: &Matrix,
    y: &Matrix,
    metric: DistanceMetric,
) -> Result<SimilarityDistributions> {
    let within = pairwise_distances(x, x, metric)?;
    let cross = pairwise_distances(x, y, metric)?;
    let n = x.rows();
    let mut p0 = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            p0.push(metric.similarity_from_distance(within.get(i, j)));
        }
    }
    let p1 = cross
        .values
        .iter()
        .map(|&d| metric.similarity_from_distance(d))
        .collect();
    Ok(SimilarityDistributions { p0, p1 })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Integrates `|F_u - F_v|^power` between consecutive pooled sample points,
/// where `F` are the empirical CDFs. Inputs must be sorted.
fn cdf_gap_integral(u: &[f64], v: &[f64], power: i32) -> f64 {
    let mut all: Vec<f64> = u.iter().chain(v).copied().collect();
    all.sort_by(f64::total_cmp);
    let (nu, nv) = (u.len() as f64, v.len() as f64);
    let (mut iu, mut iv) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        let at = w[0];
        while iu < u.len() && u[iu] <= at {
            iu += 1;
        }
        while iv < v.len() && v[iv] <= at {
            iv += 1;
        }
        let gap = (iu as f64 / nu - iv as f64 / nv).abs();
        total += (w[1] - w[0]) * gap.powi(power);
    }
    total
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// First Wasserstein (earth mover's) distance between two 1-D samples.
pub fn emd_1d(u: &[f64], v: &[f64]) -> f64 {
    cdf_gap_integral(&sorted(u), &sorted(v), 1)
}

/// 1-D energy distance `sqrt(2 * integral (F_u - F_v)^2)`.
pub fn energy_1d(u: &[f64], v: &[f64]) -> f64 {
    (2.0 * cdf_gap_integral(&sorted(u), &sorted(v), 2)).sqrt()
}

fn statistic(mode: EffectMode, u: &[f64], v: &[f64]) -> f64 {
    match mode {
        EffectMode::Sim1dMean => (mean(u) - mean(v)).abs(),
        EffectMode::Sim1dEmd => emd_1d(u, v),
        EffectMode::Sim1dEnergy => energy_1d(u, v),
        EffectMode::EmbeddingEnergy => unreachable!("checked by caller"),
    }
}

pub fn sim1d_test(
    p0: &[f64],
    p1: &[f64],
    mode: EffectMode,
    permutations: usize,
    seed: u64,
) -> Result<TestResult> {
    sim1d_test_with(p0, p1, mode, permutations, seed, PValueEstimator::Raw)
}

/// Pools `p0` and `p1` (each sorted first), re-splits at `p0.len()` under
/// seeded shuffles, and counts resamples whose statistic reaches the
/// observed one in absolute value.
pub fn sim1d_test_with(
    p0: &[f64],
    p1: &[f64],
    mode: EffectMode,
    permutations: usize,
    seed: u64,
    estimator: PValueEstimator,
) -> Result<TestResult> {
    if mode == EffectMode::EmbeddingEnergy {
        return Err(Error::Argument("sim1d_test needs a sim1d mode".into()));
    }
    if p0.is_empty() || p1.is_empty() {
        return Err(Error::Argument(
            "similarity distributions must both be nonempty (n >= 2 for p0)".into(),
        ));
    }
    if permutations == 0 {
        return Err(Error::Argument("permutations must be at least 1".into()));
    }
    let observed = statistic(mode, p0, p1);
    let mut pooled = sorted(p0);
    pooled.extend(sorted(p1));
    let split = p0.len();
    let scale = pooled.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    let hits: usize = (0..permutations)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::stream(seed, r as u64);
            let mut perm = pooled.clone();
            seed::shuffle(&mut rng, &mut perm);
            let s = statistic(mode, &perm[..split], &perm[split..]);
            usize::from(exceeds(s.abs(), observed.abs(), scale))
        })
        .sum();

    Ok(TestResult {
        effect_size: observed,
        p_value: estimator.p_value(hits, permutations),
        mode,
        // Overwritten by callers that know which metric built the similarities.
        metric: DistanceMetric::CosineDistance,
        permutations,
        seed,
    })
}
