use serde::{Deserialize, Serialize};

/// How permutation counts turn into a p-value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueEstimator {
    /// `hits / permutations`.
    #[default]
    Raw,
    /// `(hits + 1) / (permutations + 1)`; never exactly zero.
    AddOne,
}

impl PValueEstimator {
    pub fn p_value(self, hits: usize, permutations: usize) -> f64 {
        match self {
            PValueEstimator::Raw => hits as f64 / permutations as f64,
            PValueEstimator::AddOne => (hits + 1) as f64 / (permutations + 1) as f64,
        }
    }
}

/// Relative slack when comparing a permuted statistic to the observed one.
/// Splits that are mathematically tied with the observed split can differ
/// from it in the last few bits because their sums run in another order.
const TIE_SLACK: f64 = 1e-9;

/// `permuted >= observed`, treating values within `TIE_SLACK * scale` as equal.
pub(crate) fn exceeds(permuted: f64, observed: f64, scale: f64) -> bool {
    permuted >= observed - TIE_SLACK * scale.abs()
}
