use rayon::prelude::*;

use super::{
    distance::{pairwise_distances, DistanceMatrix},
    permutation::{exceeds, PValueEstimator},
    DistanceMetric, EffectMode, Matrix, TestResult,
};
use crate::error::{Error, Result};
use crate::seed;

/// Energy distance `2A - B - C` over pairwise distances, where `A` is the
/// mean cross distance and `B`, `C` the mean within-set distances. The
/// within-set means run over all ordered pairs including the zero diagonal.
pub fn energy_distance(x: &Matrix, y: &Matrix, metric: DistanceMetric) -> Result<f64> {
    check_nonempty(x, y)?;
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let xy = pairwise_distances(x, y, metric)?.sum();
    let xx = pairwise_distances(x, x, metric)?.sum();
    let yy = pairwise_distances(y, y, metric)?.sum();
    Ok((2.0 / (n * m)) * xy - (1.0 / (n * n)) * xx - (1.0 / (m * m)) * yy)
}

fn check_nonempty(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("energy distance needs at least one row per set".into()));
    }
    Ok(())
}

/// Energy distance of the split `group_x | rest` of a pooled distance matrix.
fn split_energy(pooled: &DistanceMatrix, group_x: &[usize], group_y: &[usize]) -> f64 {
    let sum_block = |a: &[usize], b: &[usize]| -> f64 {
        a.iter()
            .map(|&i| b.iter().map(|&j| pooled.get(i, j)).sum::<f64>())
            .sum()
    };
    let (n, m) = (group_x.len() as f64, group_y.len() as f64);
    (2.0 / (n * m)) * sum_block(group_x, group_y)
        - (1.0 / (n * n)) * sum_block(group_x, group_x)
        - (1.0 / (m * m)) * sum_block(group_y, group_y)
}

/// Permutation test of the energy distance with the raw-fraction p-value.
pub fn permutation_test_energy(
    x: &Matrix,
    y: &Matrix,
    permutations: usize,
    metric: DistanceMetric,
    seed: u64,
) -> Result<TestResult> {
    permutation_test_energy_with(x, y, permutations, metric, seed, PValueEstimator::Raw)
}

/// Pools the rows of `x` and `y`, re-splits them at `x.rows()` under
/// `permutations` seeded shuffles and counts how often the permuted energy
/// distance reaches the observed one.
///
/// Rows are put in a canonical (lexicographic) order before pooling, so the
/// result does not depend on the order in which samples arrived. Shuffle `r`
/// uses `seed::stream(seed, r)`.
pub fn permutation_test_energy_with(
    x: &Matrix,
    y: &Matrix,
    permutations: usize,
    metric: DistanceMetric,
    seed: u64,
    estimator: PValueEstimator,
) -> Result<TestResult> {
    if permutations == 0 {
        return Err(Error::Argument("permutations must be at least 1".into()));
    }
    // Canonical row order makes equal multisets give exactly zero and keeps
    // the result independent of sample arrival order.
    let (x, y) = (x.canonicalized(), y.canonicalized());
    let observed = energy_distance(&x, &y, metric)?;

    let pooled = x.vstack(&y);
    let distances = pairwise_distances(&pooled, &pooled, metric)?;
    let total = pooled.rows();
    let n = x.rows();
    let scale = distances.sum() / (total * total) as f64;

    let hits: usize = (0..permutations)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::stream(seed, r as u64);
            let mut order: Vec<usize> = (0..total).collect();
            seed::shuffle(&mut rng, &mut order);
            let e = split_energy(&distances, &order[..n], &order[n..]);
            usize::from(exceeds(e, observed, scale))
        })
        .sum();

    Ok(TestResult {
        effect_size: observed,
        p_value: estimator.p_value(hits, permutations),
        mode: EffectMode::EmbeddingEnergy,
        metric,
        permutations,
        seed,
    })
}
