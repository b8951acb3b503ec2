use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::neighbors::ProviderKind;
use crate::statistics::{DistanceMetric, EffectMode, PValueEstimator};

pub const REPORT_VERSION: u32 = 1;

/// How unit p-values are combined into occurrence and token p-values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueAggregation {
    /// Arithmetic mean of the unit p-values.
    #[default]
    Mean,
    /// Fisher's method, `-2 Σ ln p` against a chi-squared with `2k` degrees
    /// of freedom.
    Fisher,
}

impl PValueAggregation {
    pub fn combine(self, p_values: &[f64]) -> f64 {
        assert!(!p_values.is_empty(), "combining no p-values");
        match self {
            PValueAggregation::Mean => mean(p_values),
            PValueAggregation::Fisher => {
                let statistic: f64 = p_values.iter().map(|p| -2.0 * p.ln()).sum();
                chi_squared_even_sf(statistic, p_values.len())
            }
        }
    }
}

impl std::str::FromStr for PValueAggregation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(PValueAggregation::Mean),
            "fisher" => Ok(PValueAggregation::Fisher),
            other => Err(crate::Error::Argument(format!("unknown p-value aggregation {other:?}"))),
        }
    }
}

/// Upper tail of a chi-squared distribution with `2 * half_df` degrees of
/// freedom: `exp(-x/2) Σ_{j<half_df} (x/2)^j / j!`.
fn chi_squared_even_sf(x: f64, half_df: usize) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    let h = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..half_df {
        term *= h / j as f64;
        sum += term;
    }
    ((-h).exp() * sum).clamp(0.0, 1.0)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Parameters that determine a report's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub generator_model: String,
    pub embedding_model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub neighbor_provider: ProviderKind,
    pub mode: EffectMode,
    pub metric: DistanceMetric,
    pub permutations: usize,
    pub run_seed: u64,
    pub p_value_estimator: PValueEstimator,
    pub p_value_aggregation: PValueAggregation,
    pub normalize_by_neighbor_distance: bool,
    pub resample_baseline_per_unit: bool,
}

/// One perturbation: a neighbour substituted at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub token: String,
    pub position: usize,
    pub neighbor: String,
    pub perturbed_prompt: String,
    pub neighbor_distance: Option<f64>,
    pub unit_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub position: usize,
    pub neighbor: String,
    /// Effect size after the optional division by `neighbor_distance`.
    pub effect_size: f64,
    pub p_value: f64,
    pub seed: u64,
    pub unit_id: String,
    pub perturbed_prompt: String,
    pub neighbor_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFailure {
    pub token: String,
    pub position: usize,
    pub neighbor: String,
    pub unit_id: String,
    pub reason: String,
}

/// Averages over one occurrence's neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceSummary {
    pub position: usize,
    pub effect_size: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSensitivity {
    pub token: String,
    pub positions: Vec<usize>,
    /// Mean effect over occurrences.
    pub omega: f64,
    /// Mean (or combined) unit p-value over occurrences.
    pub p_value: f64,
    pub intensity: u8,
    pub skipped: bool,
    pub skip_reason: Option<String>,
    pub per_occurrence: Vec<OccurrenceSummary>,
    pub units: Vec<UnitResult>,
}

impl TokenSensitivity {
    pub fn skipped(token: &str, positions: Vec<usize>, reason: impl Into<String>) -> Self {
        TokenSensitivity {
            token: token.to_owned(),
            positions,
            omega: 0.0,
            p_value: 1.0,
            intensity: 0,
            skipped: true,
            skip_reason: Some(reason.into()),
            per_occurrence: Vec::new(),
            units: Vec::new(),
        }
    }

    /// Averages `units` per occurrence, then across occurrences. Occurrences
    /// without any unit are left out; with none left the token is skipped.
    pub fn aggregate(
        token: &str,
        positions: Vec<usize>,
        units: Vec<UnitResult>,
        aggregation: PValueAggregation,
    ) -> Self {
        let per_occurrence: Vec<OccurrenceSummary> = positions
            .iter()
            .filter_map(|&position| {
                let (effects, ps): (Vec<f64>, Vec<f64>) = units
                    .iter()
                    .filter(|u| u.position == position)
                    .map(|u| (u.effect_size, u.p_value))
                    .unzip();
                (!effects.is_empty()).then(|| OccurrenceSummary {
                    position,
                    effect_size: mean(&effects),
                    p_value: aggregation.combine(&ps),
                })
            })
            .collect();
        if per_occurrence.is_empty() {
            return Self::skipped(token, positions, "all perturbations failed");
        }
        let effects: Vec<f64> = per_occurrence.iter().map(|o| o.effect_size).collect();
        let ps: Vec<f64> = per_occurrence.iter().map(|o| o.p_value).collect();
        TokenSensitivity {
            token: token.to_owned(),
            positions,
            omega: mean(&effects),
            p_value: aggregation.combine(&ps),
            intensity: 0,
            skipped: false,
            skip_reason: None,
            per_occurrence,
            units,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Some tokens were skipped or some units failed.
    Partial,
    /// No token could be scored.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub version: u32,
    pub prompt: String,
    pub run_config: RunRecord,
    /// Digest of the shared baseline responses; absent when every unit drew
    /// its own baseline.
    pub baseline_sample_digest: Option<String>,
    pub tokens: Vec<TokenSensitivity>,
    pub failures: Vec<UnitFailure>,
}

impl SensitivityReport {
    /// Builds a report and fills in the token intensities.
    pub fn new(
        prompt: String,
        run_config: RunRecord,
        baseline_sample_digest: Option<String>,
        mut tokens: Vec<TokenSensitivity>,
        failures: Vec<UnitFailure>,
    ) -> Self {
        if !tokens.is_empty() {
            let omegas: IndexMap<String, f64> = tokens.iter().map(|t| (t.token.clone(), t.omega)).collect();
            let intensities = normalize_intensities(&omegas);
            for t in &mut tokens {
                t.intensity = intensities[&t.token];
            }
        }
        SensitivityReport {
            version: REPORT_VERSION,
            prompt,
            run_config,
            baseline_sample_digest,
            tokens,
            failures,
        }
    }

    pub fn token(&self, token: &str) -> Option<&TokenSensitivity> {
        self.tokens.iter().find(|t| t.token == token)
    }

    pub fn normalized_intensity(&self) -> IndexMap<String, u8> {
        self.tokens.iter().map(|t| (t.token.clone(), t.intensity)).collect()
    }

    pub fn status(&self) -> RunStatus {
        let scored = self.tokens.iter().filter(|t| !t.skipped).count();
        if !self.tokens.is_empty() && scored == 0 {
            RunStatus::Failed
        } else if scored < self.tokens.len() || !self.failures.is_empty() {
            RunStatus::Partial
        } else {
            RunStatus::Complete
        }
    }

    pub fn omegas(&self) -> IndexMap<String, f64> {
        self.tokens.iter().map(|t| (t.token.clone(), t.omega)).collect()
    }
}

/// Min-max scales effects to 0-100, rounding half up. A constant map, or a
/// single token, maps to all zeros.
pub fn normalize_intensities(omegas: &IndexMap<String, f64>) -> IndexMap<String, u8> {
    let lo = omegas.values().copied().fold(f64::INFINITY, f64::min);
    let hi = omegas.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    omegas
        .iter()
        .map(|(token, &w)| {
            let level = if range > 0.0 && range.is_finite() {
                (100.0 * (w - lo) / range + 0.5).floor().clamp(0.0, 100.0) as u8
            } else {
                0
            };
            (token.clone(), level)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub token: String,
    pub omega: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// The `k` highest-effect scored tokens; equal effects keep prompt order.
pub fn top_k_table(report: &SensitivityReport, k: usize, alpha: f64) -> Vec<TopKRow> {
    let mut rows: Vec<(usize, &TokenSensitivity)> = report
        .tokens
        .iter()
        .filter(|t| !t.skipped)
        .map(|t| (t.positions.first().copied().unwrap_or(usize::MAX), t))
        .collect();
    rows.sort_by(|a, b| b.1.omega.total_cmp(&a.1.omega).then(a.0.cmp(&b.0)));
    rows.into_iter()
        .take(k)
        .map(|(_, t)| TopKRow {
            token: t.token.clone(),
            omega: t.omega,
            p_value: t.p_value,
            significant: t.p_value < alpha,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(items: &[(&str, f64)]) -> IndexMap<String, f64> {
        items.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    #[test]
    fn intensity_examples() {
        let n = normalize_intensities(&map(&[("a", 0.0), ("b", 0.5), ("c", 1.0)]));
        assert_eq!(n.values().copied().collect::<Vec<_>>(), [0, 50, 100]);
        assert_eq!(normalize_intensities(&map(&[("a", 0.3)]))["a"], 0);
        let c = normalize_intensities(&map(&[("a", 2.0), ("b", 2.0)]));
        assert_eq!(c.values().copied().collect::<Vec<_>>(), [0, 0]);
        // half rounds up
        let h = normalize_intensities(&map(&[("a", 0.0), ("b", 0.005), ("c", 1.0)]));
        assert_eq!(h["b"], 1);
    }

    #[test]
    fn fisher_closed_form() {
        // one p-value: chi2 with 2 dof has sf(x) = exp(-x/2), so p is unchanged
        for p in [0.01, 0.3, 0.9] {
            assert!((PValueAggregation::Fisher.combine(&[p]) - p).abs() < 1e-12);
        }
        // two p-values: sf = exp(-h)(1 + h), h = -ln(p1 p2)
        let h = -(0.2f64 * 0.5).ln();
        let expected = (-h).exp() * (1.0 + h);
        assert!((PValueAggregation::Fisher.combine(&[0.2, 0.5]) - expected).abs() < 1e-12);
        assert_eq!(PValueAggregation::Fisher.combine(&[0.0, 0.5]), 0.0);
        assert_eq!(PValueAggregation::Mean.combine(&[0.2, 0.5]), 0.35);
    }

    fn unit(position: usize, effect: f64, p: f64) -> UnitResult {
        UnitResult {
            position,
            neighbor: format!("n{effect}"),
            effect_size: effect,
            p_value: p,
            seed: 0,
            unit_id: String::new(),
            perturbed_prompt: String::new(),
            neighbor_distance: None,
        }
    }

    #[test]
    fn averages_per_occurrence_then_across() {
        let t = TokenSensitivity::aggregate(
            "w",
            vec![1, 4],
            vec![unit(1, 1.0, 0.0), unit(1, 3.0, 0.2), unit(4, 0.0, 1.0)],
            PValueAggregation::Mean,
        );
        assert_eq!(t.per_occurrence[0].effect_size, 2.0);
        assert_eq!(t.per_occurrence[1].effect_size, 0.0);
        assert_eq!(t.omega, 1.0);
        assert!((t.p_value - 0.55).abs() < 1e-12);
    }

    #[test]
    fn occurrence_without_units_is_dropped() {
        let t = TokenSensitivity::aggregate("w", vec![1, 4], vec![unit(4, 2.0, 0.5)], PValueAggregation::Mean);
        assert_eq!(t.per_occurrence.len(), 1);
        assert_eq!(t.omega, 2.0);
        let none = TokenSensitivity::aggregate("w", vec![1], vec![], PValueAggregation::Mean);
        assert!(none.skipped);
        assert_eq!((none.omega, none.p_value), (0.0, 1.0));
    }

    fn scored(token: &str, position: usize, omega: f64, p: f64) -> TokenSensitivity {
        TokenSensitivity::aggregate(token, vec![position], vec![unit(position, omega, p)], PValueAggregation::Mean)
    }

    fn record() -> RunRecord {
        RunRecord {
            generator_model: "g".into(),
            embedding_model: "e".into(),
            temperature: 1.0,
            max_output_tokens: 256,
            n: 40,
            m: 40,
            k: 3,
            neighbor_provider: ProviderKind::StaticTable,
            mode: EffectMode::EmbeddingEnergy,
            metric: DistanceMetric::CosineDistance,
            permutations: 500,
            run_seed: 0,
            p_value_estimator: PValueEstimator::Raw,
            p_value_aggregation: PValueAggregation::Mean,
            normalize_by_neighbor_distance: false,
            resample_baseline_per_unit: false,
        }
    }

    #[test]
    fn top_k_ties_keep_prompt_order() {
        let r = SensitivityReport::new(
            "b a".into(),
            record(),
            None,
            vec![scored("b", 0, 0.5, 0.01), scored("a", 1, 0.5, 0.2)],
            vec![],
        );
        let t = top_k_table(&r, 10, 0.05);
        assert_eq!(t.iter().map(|r| r.token.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert!(t[0].significant && !t[1].significant);
        assert_eq!(top_k_table(&r, 1, 0.05).len(), 1);
    }

    #[test]
    fn status_levels() {
        let ok = SensitivityReport::new("a".into(), record(), None, vec![scored("a", 0, 0.1, 0.5)], vec![]);
        assert_eq!(ok.status(), RunStatus::Complete);
        let partial = SensitivityReport::new(
            "a b".into(),
            record(),
            None,
            vec![scored("a", 0, 0.1, 0.5), TokenSensitivity::skipped("b", vec![1], "none")],
            vec![],
        );
        assert_eq!(partial.status(), RunStatus::Partial);
        let failed =
            SensitivityReport::new("b".into(), record(), None, vec![TokenSensitivity::skipped("b", vec![0], "none")], vec![]);
        assert_eq!(failed.status(), RunStatus::Failed);
        let empty = SensitivityReport::new(String::new(), record(), None, vec![], vec![]);
        assert_eq!(empty.status(), RunStatus::Complete);
    }

    proptest! {
        #[test]
        fn intensities_bounded_and_extremes_hit(values in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let m: IndexMap<String, f64> = values.iter().enumerate().map(|(i, v)| (i.to_string(), *v)).collect();
            let n = normalize_intensities(&m);
            prop_assert!(n.values().all(|v| *v <= 100));
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (k, v) in &m {
                if hi > lo && *v == hi { prop_assert_eq!(n[k], 100); }
                if *v == lo { prop_assert_eq!(n[k], 0); }
            }
        }

        #[test]
        fn monotone_aggregation(
            u in proptest::collection::vec(0.5f64..1.0, 1..6),
            v in proptest::collection::vec(0.0f64..0.49, 1..6),
        ) {
            let units = |xs: &[f64]| xs.iter().enumerate().map(|(i, x)| unit(i % 2, *x, 0.5)).collect::<Vec<_>>();
            let tu = TokenSensitivity::aggregate("u", vec![0, 1], units(&u), PValueAggregation::Mean);
            let tv = TokenSensitivity::aggregate("v", vec![0, 1], units(&v), PValueAggregation::Mean);
            prop_assert!(tu.omega > tv.omega);
        }
    }
}
