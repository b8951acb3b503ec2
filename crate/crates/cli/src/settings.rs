//! Run configuration assembled from flags, a TOML file, environment
//! variables and defaults, in that order of precedence.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use dbsa::clients::http::EmbedderConfig;
use dbsa::clients::GenerationConfig;
use dbsa::neighbors::DEFAULT_K;
use dbsa::pipeline::{DbsaConfig, PValueAggregation, ScoringConfig};
use dbsa::reporting::{OutputFormat, RenderOptions};
use dbsa::statistics::{DistanceMetric, EffectMode, PValueEstimator};
use dbsa::{Error, Result};

/// One configuration source. Every field is optional; unset fields fall
/// through to the next source.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub embedding_endpoint_url: Option<String>,
    pub embedding_model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub sample_count_n: Option<usize>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub max_concurrent_requests: Option<usize>,
    pub api_key_env: Option<String>,
    pub neighbors: Option<String>,
    pub k: Option<usize>,
    pub mode: Option<String>,
    pub metric: Option<String>,
    pub permutations: Option<usize>,
    pub run_seed: Option<u64>,
    pub p_value_estimator: Option<String>,
    pub p_value_aggregation: Option<String>,
    pub normalize_by_neighbor_distance: Option<bool>,
    pub resample_baseline_per_unit: Option<bool>,
    pub cache_dir: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub format: Option<Vec<String>>,
    pub output: Option<PathBuf>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub show_p_values: Option<bool>,
    pub suppress: Option<Vec<String>>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr; $($field:ident),* $(,)?) => {
        Layer { $($field: $hi.$field.or($lo.$field)),* }
    };
}

impl Layer {
    /// `self` wins wherever it is set.
    pub fn over(self, lower: Layer) -> Layer {
        overlay!(self, lower;
            endpoint_url, model_name, embedding_endpoint_url, embedding_model, temperature,
            max_output_tokens, sample_count_n, timeout_secs, max_retries, max_concurrent_requests,
            api_key_env, neighbors, k, mode, metric, permutations, run_seed, p_value_estimator,
            p_value_aggregation, normalize_by_neighbor_distance, resample_baseline_per_unit,
            cache_dir, mock, format, output, top_k, alpha, show_p_values, suppress,
        )
    }

    pub fn from_toml_file(path: &Path) -> Result<Layer> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
    }

    /// Reads `DBSA_*` variables through `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Layer> {
        fn parsed<T: std::str::FromStr>(lookup: &impl Fn(&str) -> Option<String>, var: &str) -> Result<Option<T>> {
            match lookup(var) {
                Some(v) if !v.is_empty() => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("environment variable {var} has invalid value {v:?}"))),
                _ => Ok(None),
            }
        }
        Ok(Layer {
            endpoint_url: parsed(&lookup, "DBSA_ENDPOINT_URL")?,
            model_name: parsed(&lookup, "DBSA_MODEL")?,
            embedding_endpoint_url: parsed(&lookup, "DBSA_EMBEDDING_ENDPOINT_URL")?,
            embedding_model: parsed(&lookup, "DBSA_EMBEDDING_MODEL")?,
            max_concurrent_requests: parsed(&lookup, "DBSA_MAX_CONCURRENT_REQUESTS")?,
            run_seed: parsed(&lookup, "DBSA_SEED")?,
            cache_dir: parsed(&lookup, "DBSA_CACHE_DIR")?,
            ..Layer::default()
        })
    }
}

/// Where substitute tokens come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NeighborSpec {
    Static(PathBuf),
    Knn(PathBuf),
    Synonyms,
}

impl std::str::FromStr for NeighborSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("static", path)) if !path.is_empty() => Ok(NeighborSpec::Static(path.into())),
            Some(("knn", path)) if !path.is_empty() => Ok(NeighborSpec::Knn(path.into())),
            None if s == "synonyms" => Ok(NeighborSpec::Synonyms),
            _ => Err(Error::Config(format!(
                "neighbors must be static:PATH, knn:PATH or synonyms, got {s:?}"
            ))),
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dbsa: DbsaConfig,
    pub embedder: EmbedderConfig,
    pub neighbors: NeighborSpec,
    pub cache_dir: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
    pub output: Option<PathBuf>,
    pub render: RenderOptions,
}

fn parse_estimator(s: &str) -> Result<PValueEstimator> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "raw" => Ok(PValueEstimator::Raw),
        "add_one" => Ok(PValueEstimator::AddOne),
        other => Err(Error::Config(format!("unknown p-value estimator {other:?}"))),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Argument(m) => Error::Config(m),
        other => other,
    }
}

impl RunConfig {
    pub fn resolve(layer: Layer) -> Result<RunConfig> {
        let defaults = GenerationConfig::default();
        let timeout = match layer.timeout_secs {
            Some(s) => Duration::try_from_secs_f64(s)
                .map_err(|_| Error::Config(format!("timeout_secs must be a nonnegative number, got {s}")))?,
            None => defaults.timeout,
        };
        let generation = GenerationConfig {
            endpoint_url: layer.endpoint_url.clone().unwrap_or(defaults.endpoint_url),
            model_name: layer.model_name.unwrap_or(defaults.model_name),
            temperature: layer.temperature.unwrap_or(defaults.temperature),
            max_output_tokens: layer.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            sample_count_n: layer.sample_count_n.unwrap_or(defaults.sample_count_n),
            timeout,
            max_retries: layer.max_retries.unwrap_or(defaults.max_retries),
            max_concurrent_requests: layer.max_concurrent_requests.unwrap_or(defaults.max_concurrent_requests),
            retry_backoff: defaults.retry_backoff,
            api_key_env: layer.api_key_env.unwrap_or(defaults.api_key_env),
        };
        let embedder_defaults = EmbedderConfig::default();
        let embedder = EmbedderConfig {
            endpoint_url: layer
                .embedding_endpoint_url
                .or(layer.endpoint_url)
                .unwrap_or(embedder_defaults.endpoint_url),
            model_name: layer.embedding_model.unwrap_or(embedder_defaults.model_name),
            timeout,
            max_retries: generation.max_retries,
            api_key_env: generation.api_key_env.clone(),
            ..embedder_defaults
        };
        let scoring = ScoringConfig {
            mode: layer.mode.as_deref().map(str::parse::<EffectMode>).transpose().map_err(config_err)?.unwrap_or_default(),
            metric: layer
                .metric
                .as_deref()
                .map(str::parse::<DistanceMetric>)
                .transpose()
                .map_err(config_err)?
                .unwrap_or(DistanceMetric::CosineDistance),
            permutations: layer.permutations,
            estimator: layer.p_value_estimator.as_deref().map(parse_estimator).transpose()?.unwrap_or_default(),
            aggregation: layer
                .p_value_aggregation
                .as_deref()
                .map(str::parse::<PValueAggregation>)
                .transpose()
                .map_err(config_err)?
                .unwrap_or_default(),
            normalize_by_neighbor_distance: layer.normalize_by_neighbor_distance.unwrap_or(false),
        };
        let dbsa = DbsaConfig {
            generation,
            k: layer.k.unwrap_or(DEFAULT_K),
            run_seed: layer.run_seed.unwrap_or(0),
            resample_baseline_per_unit: layer.resample_baseline_per_unit.unwrap_or(false),
            scoring,
        };
        let formats = layer
            .format
            .unwrap_or_else(|| vec!["ansi".into()])
            .iter()
            .map(|f| f.parse::<OutputFormat>().map_err(config_err))
            .collect::<Result<Vec<_>>>()?;
        let render = RenderOptions {
            format: formats[0],
            top_k: layer.top_k,
            alpha: layer.alpha.unwrap_or(0.05),
            show_p_values: layer.show_p_values.unwrap_or(false),
            suppress: layer.suppress.unwrap_or_default(),
        };
        let config = RunConfig {
            dbsa,
            embedder,
            neighbors: layer.neighbors.as_deref().unwrap_or("synonyms").parse()?,
            cache_dir: layer.cache_dir,
            mock: layer.mock,
            formats,
            output: layer.output,
            render,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dbsa.validate()?;
        self.render.validate().map_err(config_err)?;
        if self.formats.is_empty() {
            return Err(Error::Config("at least one output format is required".into()));
        }
        if self.formats.len() > 1 && self.output.is_none() {
            return Err(Error::Config("several formats need an output path".into()));
        }
        Ok(())
    }
}
