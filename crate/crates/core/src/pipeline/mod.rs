//! Per-token sensitivity of a generator to nearest-neighbour substitutions.
//!
//! For every unique token, every occurrence and every neighbour, the prompt
//! is perturbed at that single position, a fresh set of responses is drawn,
//! and the perturbed responses are compared to the baseline responses with
//! a two-sample permutation test in embedding space. Unit results are
//! averaged per occurrence, then across occurrences.
//!
//! The work is split in two phases. [`collect_samples`] acquires neighbours
//! and draws and embeds every sample set; [`score`] runs the statistics. The
//! same samples can be scored under several metrics or modes.

mod report;

use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{cache_key, embed, sample, Embedder, GenerationConfig, Generator, SampleCache};
use crate::error::{Error, Result};
use crate::neighbors::{with_embedding_distances, NeighborSet, NeighborSource, ProviderKind, DEFAULT_K};
use crate::seed;
use crate::statistics::{two_sample_test, DistanceMetric, EffectMode, Matrix, PValueEstimator};
use crate::tokenization::tokenize;

pub use report::{
    normalize_intensities, top_k_table, OccurrenceSummary, PValueAggregation, PerturbationRecord, RunRecord,
    RunStatus, SensitivityReport, TokenSensitivity, TopKRow, UnitFailure, UnitResult, REPORT_VERSION,
};

/// How unit comparisons are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub mode: EffectMode,
    pub metric: DistanceMetric,
    /// Defaults to the mode's own default when absent.
    pub permutations: Option<usize>,
    pub estimator: PValueEstimator,
    pub aggregation: PValueAggregation,
    /// Divide each unit's effect by the embedding distance between the
    /// token and its substitute.
    pub normalize_by_neighbor_distance: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            mode: EffectMode::EmbeddingEnergy,
            metric: DistanceMetric::CosineDistance,
            permutations: None,
            estimator: PValueEstimator::Raw,
            aggregation: PValueAggregation::Mean,
            normalize_by_neighbor_distance: false,
        }
    }
}

impl ScoringConfig {
    pub fn permutations(&self) -> usize {
        self.permutations.unwrap_or_else(|| self.mode.default_permutations())
    }

    pub fn validate(&self) -> Result<()> {
        if self.permutations == Some(0) {
            return Err(Error::Config("permutations must be at least 1".into()));
        }
        if self.normalize_by_neighbor_distance && self.mode.is_sim1d() {
            return Err(Error::Config(format!(
                "neighbor-distance normalization applies to embedding effects only, not mode {}",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbsaConfig {
    pub generation: GenerationConfig,
    /// Neighbours per occurrence.
    pub k: usize,
    pub run_seed: u64,
    /// Draw a fresh baseline for every unit instead of one per run.
    pub resample_baseline_per_unit: bool,
    pub scoring: ScoringConfig,
}

impl Default for DbsaConfig {
    fn default() -> Self {
        DbsaConfig {
            generation: GenerationConfig::default(),
            k: DEFAULT_K,
            run_seed: 0,
            resample_baseline_per_unit: false,
            scoring: ScoringConfig::default(),
        }
    }
}

impl DbsaConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.scoring.validate()
    }

    /// Sampling calls a run makes: one baseline (or one per unit) plus one
    /// per unit.
    pub fn sampling_calls(&self, units: usize) -> usize {
        if self.resample_baseline_per_unit {
            2 * units
        } else {
            1 + units
        }
    }
}

/// The services a run talks to.
#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub neighbors: &'a NeighborSource,
    pub cache: Option<&'a SampleCache>,
}

pub fn unit_id(prompt: &str, position: usize, neighbor: &str) -> String {
    let prompt_digest = seed::digest_hex(prompt);
    let canonical = serde_json::json!([prompt_digest, position, neighbor]).to_string();
    seed::digest_hex(canonical)[..16].to_owned()
}

/// Neighbours for each unique token, in first-occurrence order. `Err` holds
/// the reason a token has none.
pub type NeighborPlan = Vec<(String, Vec<usize>, std::result::Result<NeighborSet, String>)>;

/// Acquires neighbours for every unique token of `prompt`.
pub fn plan_neighbors(prompt: &str, config: &DbsaConfig, clients: Clients<'_>) -> Result<NeighborPlan> {
    let tokenized = tokenize(prompt);
    let generation = effective_generation(config, clients);
    let entries: Vec<(&String, &Vec<usize>)> = tokenized.unique_index().iter().collect();
    let results: Vec<Result<std::result::Result<NeighborSet, String>>> = entries
        .par_iter()
        .map(|(token, _)| {
            let neighbor_seed = seed::derive(config.run_seed, format!("neighbors/{token}"));
            let acquired = clients
                .neighbors
                .neighbors(token, prompt, clients.generator, clients.embedder, &generation, config.k, neighbor_seed)
                .and_then(|set| {
                    if config.scoring.normalize_by_neighbor_distance {
                        with_embedding_distances(set, clients.embedder)
                    } else {
                        Ok(set)
                    }
                });
            match acquired {
                Ok(set) if set.is_empty() => Ok(Err("no perturbation available".to_owned())),
                Ok(set) => Ok(Ok(set)),
                Err(e @ Error::Config(_)) => Err(e),
                Err(e) => Ok(Err(e.to_string())),
            }
        })
        .collect();
    entries
        .into_iter()
        .zip(results)
        .map(|((token, positions), r)| Ok((token.clone(), positions.clone(), r?)))
        .collect()
}

/// The perturbation units of a neighbour plan, grouped by token.
pub fn perturbation_records(prompt: &str, plan: &NeighborPlan) -> Vec<PerturbationRecord> {
    let tokenized = tokenize(prompt);
    let mut records = Vec::new();
    for (token, positions, neighbors) in plan {
        let Ok(set) = neighbors else { continue };
        for &position in positions {
            for n in &set.neighbors {
                records.push(PerturbationRecord {
                    token: token.clone(),
                    position,
                    neighbor: n.token.clone(),
                    perturbed_prompt: tokenized.substitute(position, &n.token),
                    neighbor_distance: n.distance,
                    unit_id: unit_id(prompt, position, &n.token),
                });
            }
        }
    }
    records
}

fn effective_generation(config: &DbsaConfig, clients: Clients<'_>) -> GenerationConfig {
    GenerationConfig {
        model_name: clients.generator.model_name().to_owned(),
        ..config.generation.clone()
    }
}

/// Draws and embeds a sample set, going through the cache when present.
fn draw(clients: Clients<'_>, prompt: &str, generation: &GenerationConfig, draw_seed: u64) -> Result<(String, Matrix)> {
    let key = cache_key(prompt, generation, draw_seed);
    let samples = match clients.cache {
        Some(cache) => cache.samples_or_else(&key, generation, || sample(clients.generator, prompt, generation, draw_seed))?,
        None => sample(clients.generator, prompt, generation, draw_seed)?,
    };
    let embeddings = match clients.cache {
        Some(cache) => cache.embeddings_or_else(&key, clients.embedder.model_name(), || {
            embed(clients.embedder, &samples.responses)
        })?,
        None => embed(clients.embedder, &samples.responses)?,
    };
    if embeddings.rows() != samples.responses.len() {
        return Err(Error::Consistency(format!(
            "{} embeddings for {} responses",
            embeddings.rows(),
            samples.responses.len()
        )));
    }
    Ok((samples.digest(), embeddings))
}

#[derive(Debug, Clone)]
struct UnitDraws {
    baseline: Arc<Matrix>,
    perturbed: Matrix,
}

#[derive(Debug, Clone)]
struct SampledUnit {
    record: PerturbationRecord,
    seed: u64,
    draws: std::result::Result<UnitDraws, String>,
}

/// Everything drawn for one prompt, ready to be scored.
#[derive(Debug, Clone)]
pub struct SampledRun {
    prompt: String,
    config: DbsaConfig,
    generator_model: String,
    embedding_model: String,
    provider: ProviderKind,
    baseline_digest: Option<String>,
    plan: NeighborPlan,
    units: Vec<SampledUnit>,
}

impl SampledRun {
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn config(&self) -> &DbsaConfig {
        &self.config
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &PerturbationRecord> {
        self.units.iter().map(|u| &u.record)
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Acquires neighbours and draws every sample set the run needs. Fails only
/// on configuration errors or when the shared baseline cannot be drawn;
/// per-unit failures are kept and reported by [`score`].
pub fn collect_samples(prompt: &str, config: &DbsaConfig, clients: Clients<'_>) -> Result<SampledRun> {
    config.validate()?;
    let pool = thread_pool(config.generation.max_concurrent_requests)?;
    pool.install(|| collect_in_pool(prompt, config, clients))
}

fn collect_in_pool(prompt: &str, config: &DbsaConfig, clients: Clients<'_>) -> Result<SampledRun> {
    let generation = effective_generation(config, clients);
    let plan = plan_neighbors(prompt, config, clients)?;
    let records = perturbation_records(prompt, &plan);
    info!(
        "{} unique tokens, {} perturbation units, {} sampling calls",
        plan.len(),
        records.len(),
        config.sampling_calls(records.len())
    );

    let shared_baseline = if config.resample_baseline_per_unit || records.is_empty() {
        None
    } else {
        let (digest, embeddings) = draw(clients, prompt, &generation, seed::derive(config.run_seed, "baseline"))?;
        Some((digest, Arc::new(embeddings)))
    };

    let sampled: Vec<Result<SampledUnit>> = records
        .into_par_iter()
        .map(|record| {
            let unit_seed = seed::derive(config.run_seed, &record.unit_id);
            let drawn = (|| -> Result<UnitDraws> {
                let baseline = match &shared_baseline {
                    Some((_, m)) => m.clone(),
                    None => Arc::new(draw(clients, prompt, &generation, seed::derive(unit_seed, "baseline"))?.1),
                };
                let (_, perturbed) = draw(clients, &record.perturbed_prompt, &generation, seed::derive(unit_seed, "perturbed"))?;
                Ok(UnitDraws { baseline, perturbed })
            })();
            let draws = match drawn {
                Ok(d) => Ok(d),
                Err(e @ Error::Config(_)) => return Err(e),
                Err(e) => {
                    warn!("unit {} ({:?} at {}) failed: {e}", record.unit_id, record.neighbor, record.position);
                    Err(e.to_string())
                }
            };
            Ok(SampledUnit {
                record,
                seed: unit_seed,
                draws,
            })
        })
        .collect();

    Ok(SampledRun {
        prompt: prompt.to_owned(),
        config: config.clone(),
        generator_model: generation.model_name,
        embedding_model: clients.embedder.model_name().to_owned(),
        provider: clients.neighbors.kind(),
        baseline_digest: shared_baseline.map(|(d, _)| d),
        plan,
        units: sampled.into_iter().collect::<Result<_>>()?,
    })
}

/// Runs the statistics over drawn samples and aggregates them per token.
pub fn score(run: &SampledRun, scoring: &ScoringConfig) -> Result<SensitivityReport> {
    scoring.validate()?;
    let permutations = scoring.permutations();
    let pool = thread_pool(run.config.generation.max_concurrent_requests)?;
    let outcomes: Vec<std::result::Result<UnitResult, String>> = pool.install(|| {
        run.units
            .par_iter()
            .map(|unit| {
                let draws = unit.draws.as_ref().map_err(Clone::clone)?;
                let test_seed = seed::derive(unit.seed, "test");
                let result = two_sample_test(
                    &draws.baseline,
                    &draws.perturbed,
                    scoring.mode,
                    scoring.metric,
                    permutations,
                    test_seed,
                    scoring.estimator,
                )
                .map_err(|e| e.to_string())?;
                let effect_size = match (scoring.normalize_by_neighbor_distance, unit.record.neighbor_distance) {
                    (true, Some(d)) if d > 0.0 => result.effect_size / d,
                    _ => result.effect_size,
                };
                Ok(UnitResult {
                    position: unit.record.position,
                    neighbor: unit.record.neighbor.clone(),
                    effect_size,
                    p_value: result.p_value,
                    seed: test_seed,
                    unit_id: unit.record.unit_id.clone(),
                    perturbed_prompt: unit.record.perturbed_prompt.clone(),
                    neighbor_distance: unit.record.neighbor_distance,
                })
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut by_token: indexmap::IndexMap<&str, Vec<UnitResult>> = indexmap::IndexMap::new();
    for (unit, outcome) in run.units.iter().zip(outcomes) {
        match outcome {
            Ok(r) => by_token.entry(unit.record.token.as_str()).or_default().push(r),
            Err(reason) => failures.push(UnitFailure {
                token: unit.record.token.clone(),
                position: unit.record.position,
                neighbor: unit.record.neighbor.clone(),
                unit_id: unit.record.unit_id.clone(),
                reason,
            }),
        }
    }

    let tokens = run
        .plan
        .iter()
        .map(|(token, positions, neighbors)| match neighbors {
            Err(reason) => TokenSensitivity::skipped(token, positions.clone(), reason.clone()),
            Ok(_) => TokenSensitivity::aggregate(
                token,
                positions.clone(),
                by_token.shift_remove(token.as_str()).unwrap_or_default(),
                scoring.aggregation,
            ),
        })
        .collect();

    let c = &run.config;
    let run_config = RunRecord {
        generator_model: run.generator_model.clone(),
        embedding_model: run.embedding_model.clone(),
        temperature: c.generation.temperature,
        max_output_tokens: c.generation.max_output_tokens,
        n: c.generation.sample_count_n,
        m: c.generation.sample_count_n,
        k: c.k,
        neighbor_provider: run.provider,
        mode: scoring.mode,
        metric: scoring.metric,
        permutations,
        run_seed: c.run_seed,
        p_value_estimator: scoring.estimator,
        p_value_aggregation: scoring.aggregation,
        normalize_by_neighbor_distance: scoring.normalize_by_neighbor_distance,
        resample_baseline_per_unit: c.resample_baseline_per_unit,
    };
    Ok(SensitivityReport::new(
        run.prompt.clone(),
        run_config,
        run.baseline_digest.clone(),
        tokens,
        failures,
    ))
}

/// Samples and scores `prompt` under `config`.
pub fn run_dbsa(prompt: &str, config: &DbsaConfig, clients: Clients<'_>) -> Result<SensitivityReport> {
    let run = collect_samples(prompt, config, clients)?;
    score(&run, &config.scoring)
}
