//! Example prompts and neighbour tables bundled with the crate.

use crate::error::Result;
use crate::neighbors::{ProviderKind, StaticNeighborTable};
use crate::pipeline::{PValueAggregation, RunRecord, SensitivityReport, TokenSensitivity, UnitResult};
use crate::statistics::{DistanceMetric, EffectMode, PValueEstimator};
use crate::tokenization::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixture {
    pub file_name: &'static str,
    pub contents: &'static str,
}

pub const PROMPT_LEGAL: &str = include_str!("../fixtures/prompt_legal.txt");
pub const PROMPT_MEDICAL: &str = include_str!("../fixtures/prompt_medical.txt");
pub const PROMPT_TRADING: &str = include_str!("../fixtures/prompt_trading.txt");
pub const PROMPT_MANUFACTURING: &str = include_str!("../fixtures/prompt_manufacturing.txt");

pub const NEIGHBORS_TRADING: &str = include_str!("../fixtures/closest_words_trading.json");
pub const NEIGHBORS_MANUFACTURING: &str = include_str!("../fixtures/closest_words_manufacturing.json");

pub const PROMPTS: [Fixture; 4] = [
    Fixture { file_name: "legal.txt", contents: PROMPT_LEGAL },
    Fixture { file_name: "medical.txt", contents: PROMPT_MEDICAL },
    Fixture { file_name: "trading.txt", contents: PROMPT_TRADING },
    Fixture { file_name: "manufacturing.txt", contents: PROMPT_MANUFACTURING },
];

pub const NEIGHBOR_TABLES: [Fixture; 2] = [
    Fixture { file_name: "closest_words_trading.json", contents: NEIGHBORS_TRADING },
    Fixture { file_name: "closest_words_manufacturing.json", contents: NEIGHBORS_MANUFACTURING },
];

pub fn all() -> impl Iterator<Item = Fixture> {
    PROMPTS.into_iter().chain(NEIGHBOR_TABLES)
}

pub fn trading_table() -> Result<StaticNeighborTable> {
    StaticNeighborTable::from_json_str(NEIGHBORS_TRADING)
}

pub fn manufacturing_table() -> Result<StaticNeighborTable> {
    StaticNeighborTable::from_json_str(NEIGHBORS_MANUFACTURING)
}

/// Reference top-5 scores for the medical prompt: (token, effect, p-value).
pub const REFERENCE_TOP5: [(&str, f64, f64); 5] = [
    ("congestive", 0.08, 0.11),
    ("examination", 0.07, 0.16),
    ("Lower", 0.07, 0.28),
    ("mid", 0.07, 0.39),
    ("hypertensive", 0.06, 0.31),
];

/// A report over the medical prompt holding only the [`REFERENCE_TOP5`]
/// tokens, each with a single unit at its first occurrence.
pub fn reference_top5_report() -> SensitivityReport {
    let tokenized = tokenize(PROMPT_MEDICAL);
    let tokens = REFERENCE_TOP5
        .iter()
        .map(|&(token, omega, p)| {
            let positions = tokenized.unique_index()[token].clone();
            let unit = UnitResult {
                position: positions[0],
                neighbor: String::new(),
                effect_size: omega,
                p_value: p,
                seed: 0,
                unit_id: String::new(),
                perturbed_prompt: String::new(),
                neighbor_distance: None,
            };
            TokenSensitivity::aggregate(token, positions[..1].to_vec(), vec![unit], PValueAggregation::Mean)
        })
        .collect();
    let run_config = RunRecord {
        generator_model: "reference".into(),
        embedding_model: "reference".into(),
        temperature: 1.0,
        max_output_tokens: 256,
        n: 40,
        m: 40,
        k: 3,
        neighbor_provider: ProviderKind::GeneratorSynonyms,
        mode: EffectMode::EmbeddingEnergy,
        metric: DistanceMetric::CosineDistance,
        permutations: 500,
        run_seed: 0,
        p_value_estimator: PValueEstimator::Raw,
        p_value_aggregation: PValueAggregation::Mean,
        normalize_by_neighbor_distance: false,
        resample_baseline_per_unit: false,
    };
    SensitivityReport::new(PROMPT_MEDICAL.to_owned(), run_config, None, tokens, Vec::new())
}
