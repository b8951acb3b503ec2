//! Deterministic stand-ins for the generation and embedding endpoints.
//!
//! The mock generator is a list of rules; the first rule whose matcher
//! accepts the prompt supplies a categorical distribution over fixed
//! response strings, sampled with the draw seed. The mock embedder maps a
//! text to term counts over a fixed vocabulary.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Embedder, Generation, GenerationConfig, Generator};
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenization::tokenize;

/// Which prompts a rule applies to. Token matchers compare whole tokens as
/// produced by the prompt tokenizer, case-sensitively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMatcher {
    Any,
    Exact(String),
    ContainsToken(String),
    MissingToken(String),
    /// Substring match on the raw prompt.
    Contains(String),
    AllOf(Vec<PromptMatcher>),
    AnyOf(Vec<PromptMatcher>),
}

impl PromptMatcher {
    pub fn matches(&self, prompt: &str) -> bool {
        let has_token = |t: &str| tokenize(prompt).tokens().iter().any(|tok| tok.text == t);
        match self {
            PromptMatcher::Any => true,
            PromptMatcher::Exact(s) => prompt == s,
            PromptMatcher::ContainsToken(t) => has_token(t),
            PromptMatcher::MissingToken(t) => !has_token(t),
            PromptMatcher::Contains(s) => prompt.contains(s.as_str()),
            PromptMatcher::AllOf(ms) => ms.iter().all(|m| m.matches(prompt)),
            PromptMatcher::AnyOf(ms) => ms.iter().any(|m| m.matches(prompt)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedResponse {
    pub text: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: PromptMatcher,
    pub responses: Vec<WeightedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockGeneratorSpec {
    #[serde(default = "mock_name")]
    pub model_name: String,
    pub rules: Vec<MockRule>,
}

fn mock_name() -> String {
    "mock".into()
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    spec: MockGeneratorSpec,
}

impl MockGenerator {
    pub fn new(spec: MockGeneratorSpec) -> Result<Self> {
        for (i, rule) in spec.rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(Error::Config(format!("mock rule {i} has no responses")));
            }
            if rule.responses.iter().any(|r| !r.weight.is_finite() || r.weight < 0.0)
                || rule.responses.iter().all(|r| r.weight == 0.0)
            {
                return Err(Error::Config(format!("mock rule {i} has invalid weights")));
            }
        }
        Ok(MockGenerator { spec })
    }

    /// A generator that ignores the prompt.
    pub fn uniform(model_name: &str, responses: &[(&str, f64)]) -> Self {
        MockGenerator::new(MockGeneratorSpec {
            model_name: model_name.into(),
            rules: vec![MockRule {
                when: PromptMatcher::Any,
                responses: responses
                    .iter()
                    .map(|(t, w)| WeightedResponse {
                        text: (*t).into(),
                        weight: *w,
                    })
                    .collect(),
            }],
        })
        .expect("valid uniform mock")
    }

    pub fn spec(&self) -> &MockGeneratorSpec {
        &self.spec
    }
}

impl Generator for MockGenerator {
    fn model_name(&self) -> &str {
        &self.spec.model_name
    }

    fn generate(&self, prompt: &str, _config: &GenerationConfig, seed: u64) -> Result<Generation> {
        let rule = self
            .spec
            .rules
            .iter()
            .find(|r| r.when.matches(prompt))
            .ok_or_else(|| Error::Config(format!("no mock rule matches prompt {prompt:?}")))?;
        let total: f64 = rule.responses.iter().map(|r| r.weight).sum();
        let target = seed::unit_f64(&mut seed::stream(seed, 0)) * total;
        let mut acc = 0.0;
        let mut chosen = rule.responses.last().expect("nonempty");
        for r in &rule.responses {
            acc += r.weight;
            if target < acc {
                chosen = r;
                break;
            }
        }
        Ok(Generation {
            text: chosen.text.clone(),
            retries: 0,
        })
    }
}

static WORD_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+").expect("valid"));

/// Term-count embedder over a fixed, case-insensitive vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEmbedder {
    #[serde(default = "mock_embedder_name")]
    pub model_name: String,
    pub vocab: Vec<String>,
}

fn mock_embedder_name() -> String {
    "mock-bow".into()
}

impl MockEmbedder {
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MockEmbedder {
            model_name: mock_embedder_name(),
            vocab: vocab.into_iter().map(Into::into).collect(),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; self.vocab.len()];
        for word in WORD_RE.find_iter(text) {
            let word = word.as_str().to_lowercase();
            for (slot, v) in counts.iter_mut().zip(&self.vocab) {
                if v.to_lowercase() == word {
                    *slot += 1.0;
                }
            }
        }
        counts
    }
}

impl Embedder for MockEmbedder {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.vocab.is_empty() {
            return Err(Error::Config("mock embedder vocabulary is empty".into()));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Mock generator and embedder described together, as loaded from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub generator: MockGeneratorSpec,
    pub embedder: MockEmbedder,
}

impl MockSpec {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("mock spec {}: {e}", path.display())))
    }
}

/// Wraps a generator and counts draws per prompt.
#[derive(Debug)]
pub struct CountingGenerator<G> {
    inner: G,
    draws: Mutex<HashMap<String, usize>>,
    total: AtomicUsize,
}

impl<G: Generator> CountingGenerator<G> {
    pub fn new(inner: G) -> Self {
        CountingGenerator {
            inner,
            draws: Mutex::new(HashMap::new()),
            total: AtomicUsize::new(0),
        }
    }

    pub fn draws_for(&self, prompt: &str) -> usize {
        self.draws.lock().expect("poisoned").get(prompt).copied().unwrap_or(0)
    }

    pub fn total_draws(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn distinct_prompts(&self) -> usize {
        self.draws.lock().expect("poisoned").len()
    }

    pub fn snapshot(&self) -> HashMap<String, usize> {
        self.draws.lock().expect("poisoned").clone()
    }
}

impl<G: Generator> Generator for CountingGenerator<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn generate(&self, prompt: &str, config: &GenerationConfig, seed: u64) -> Result<Generation> {
        *self
            .draws
            .lock()
            .expect("poisoned")
            .entry(prompt.to_owned())
            .or_default() += 1;
        self.total.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(prompt, config, seed)
    }
}
