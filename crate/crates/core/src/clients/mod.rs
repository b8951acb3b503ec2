//! Sampling from a stochastic text generator and embedding its responses.
//!
//! Real endpoints speak the OpenAI-compatible chat-completions and embeddings
//! wire formats ([`http`]); deterministic mocks ([`mock`]) stand in for them
//! in tests. Every draw is seeded from `(unit seed, draw index)`, so the
//! result never depends on scheduling.

pub mod cache;
pub mod http;
pub mod mock;

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::statistics::Matrix;

pub use cache::SampleCache;

pub const DEFAULT_API_KEY_ENV: &str = "DBSA_API_KEY";

/// Parameters for sampling responses from a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Responses per sample set. Baseline and perturbed sets use the same n.
    pub sample_count_n: usize,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// First retry delay; doubles on each further retry.
    #[serde(with = "duration_secs")]
    pub retry_backoff: Duration,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4".into(),
            temperature: 1.0,
            max_output_tokens: 256,
            sample_count_n: 40,
            timeout: Duration::from_secs(60),
            max_retries: 5,
            max_concurrent_requests: 8,
            retry_backoff: Duration::from_millis(500),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count_n < 2 {
            return Err(Error::Config(format!(
                "sample_count_n must be at least 2, got {}",
                self.sample_count_n
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        if self.max_concurrent_requests == 0 {
            return Err(Error::Config("max_concurrent_requests must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// One generated response and how many retries it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub retries: u32,
}

/// A stochastic text generator `S(x)`. Each call is an independent draw with
/// no conversation state.
pub trait Generator: Send + Sync {
    fn model_name(&self) -> &str;

    /// Draws one response. `seed` determines the draw for deterministic
    /// generators; remote generators may ignore it.
    fn generate(&self, prompt: &str, config: &GenerationConfig, seed: u64) -> Result<Generation>;
}

/// Maps texts to fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn model_name(&self) -> &str;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn generate(&self, prompt: &str, config: &GenerationConfig, seed: u64) -> Result<Generation> {
        (**self).generate(prompt, config, seed)
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        (**self).embed_batch(texts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_name: String,
    pub seed: u64,
    /// Unix seconds when the responses were drawn.
    pub created_at: u64,
    /// Retries spent across all draws.
    pub retries: u32,
}

/// `n` responses for one prompt, optionally with their embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub prompt: String,
    pub responses: Vec<String>,
    pub embeddings: Option<Matrix>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn with_embeddings(mut self, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != self.responses.len() {
            return Err(Error::Consistency(format!(
                "{} embeddings for {} responses",
                embeddings.rows(),
                self.responses.len()
            )));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    /// Hex digest of the responses in order.
    pub fn digest(&self) -> String {
        let joined = serde_json::to_vec(&self.responses).expect("strings serialize");
        seed::digest_hex(joined)
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Draws `config.sample_count_n` responses to `prompt`. Draw `j` uses seed
/// `seed::derive_indexed(seed, "draw", j)`; draws may run in parallel and
/// are returned in index order.
pub fn sample(
    generator: &dyn Generator,
    prompt: &str,
    config: &GenerationConfig,
    seed: u64,
) -> Result<SampleSet> {
    config.validate()?;
    let n = config.sample_count_n;
    let draws: Vec<Result<Generation>> = (0..n)
        .into_par_iter()
        .map(|j| generator.generate(prompt, config, seed::derive_indexed(seed, "draw", j as u64)))
        .collect();

    let completed = draws.iter().filter(|d| d.is_ok()).count();
    let mut responses = Vec::with_capacity(n);
    let mut retries = 0;
    for draw in draws {
        match draw {
            Ok(g) => {
                retries += g.retries;
                responses.push(g.text);
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                return Err(Error::Sampling {
                    completed,
                    requested: n,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(SampleSet {
        prompt: prompt.to_owned(),
        responses,
        embeddings: None,
        provenance: Provenance {
            model_name: generator.model_name().to_owned(),
            seed,
            created_at: now_unix(),
            retries,
        },
    })
}

/// Embeds `texts`, one row per text.
pub fn embed(embedder: &dyn Embedder, texts: &[String]) -> Result<Matrix> {
    if texts.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let rows = embedder.embed_batch(texts)?;
    if rows.len() != texts.len() {
        return Err(Error::Consistency(format!(
            "embedder returned {} rows for {} texts",
            rows.len(),
            texts.len()
        )));
    }
    Matrix::from_rows(rows)
}

/// Stable content key for the sample set drawn for `(prompt, config, seed)`.
/// Covers the prompt, model, temperature, output length, n and seed.
pub fn cache_key(prompt: &str, config: &GenerationConfig, seed: u64) -> String {
    let canonical = serde_json::json!({
        "prompt": prompt,
        "model": config.model_name,
        "temperature_bits": config.temperature.to_bits(),
        "max_output_tokens": config.max_output_tokens,
        "n": config.sample_count_n,
        "seed": seed,
    });
    seed::digest_hex(canonical.to_string())
}

#[cfg(test)]
mod tests {
    use super::mock::{MockEmbedder, MockGenerator};
    use super::*;

    fn config(n: usize) -> GenerationConfig {
        GenerationConfig {
            sample_count_n: n,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_mock_is_reproducible() {
        let g = MockGenerator::uniform("mock", &[("yes", 0.5), ("no", 0.5)]);
        let a = sample(&g, "q", &config(40), 7).unwrap();
        let b = sample(&g, "q", &config(40), 7).unwrap();
        assert_eq!(a.responses, b.responses);
        assert_eq!(a.responses.len(), 40);
        assert!(a.responses.iter().all(|r| r == "yes" || r == "no"));
        let yes = a.responses.iter().filter(|r| *r == "yes").count();
        assert!((10..=30).contains(&yes), "{yes}");
        let c = sample(&g, "q", &config(40), 8).unwrap();
        assert_ne!(a.responses, c.responses);
    }

    #[test]
    fn constant_generator() {
        let g = MockGenerator::uniform("mock", &[("ok", 1.0)]);
        let s = sample(&g, "q", &config(2), 0).unwrap();
        assert_eq!(s.responses, ["ok", "ok"]);
        assert_eq!(s.provenance.retries, 0);
    }

    #[test]
    fn n_below_two_rejected() {
        let g = MockGenerator::uniform("mock", &[("ok", 1.0)]);
        assert!(matches!(sample(&g, "q", &config(1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn bag_of_words_embedding() {
        let e = MockEmbedder::new(["heart", "failure"]);
        let m = embed(&e, &["heart failure".into(), "heart".into()]).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn empty_embed_batch() {
        let e = MockEmbedder::new(["a"]);
        let err = embed(&e, &[]).unwrap_err();
        assert!(err.to_string().contains("empty batch"));
    }

    #[test]
    fn identical_texts_identical_rows() {
        let e = MockEmbedder::new(["a", "b"]);
        let m = embed(&e, &["a b b".into(), "a b b".into()]).unwrap();
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn cache_keys() {
        let c = config(40);
        assert_eq!(cache_key("p", &c, 1), cache_key("p", &c, 1));
        assert_ne!(cache_key("p", &c, 1), cache_key("q", &c, 1));
        let hotter = GenerationConfig {
            temperature: 0.7,
            ..c.clone()
        };
        assert_ne!(cache_key("p", &c, 1), cache_key("p", &hotter, 1));
        assert_ne!(cache_key("p", &c, 1), cache_key("p", &c, 2));
        // endpoint and concurrency do not change what is sampled
        let elsewhere = GenerationConfig {
            endpoint_url: "http://localhost:1".into(),
            max_concurrent_requests: 1,
            ..c.clone()
        };
        assert_eq!(cache_key("p", &c, 1), cache_key("p", &elsewhere, 1));
    }
}
