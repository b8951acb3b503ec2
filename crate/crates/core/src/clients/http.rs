//! OpenAI-compatible HTTP clients.
//!
//! `POST {endpoint}/chat/completions` with
//! `{model, temperature, max_tokens, messages: [{role: "user", content}]}`
//! and `POST {endpoint}/embeddings` with `{model, input: [texts]}`.
//! One request per sampled response. 429, 5xx and network failures are
//! retried with exponential backoff; any other 4xx fails immediately.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{duration_secs, Embedder, Generation, GenerationConfig, Generator, DEFAULT_API_KEY_ENV};
use crate::error::{Error, Result};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        ConcurrencyLimit {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("poisoned");
        }
        *n += 1;
        Permit { limit: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limit.in_flight.lock().expect("poisoned") -= 1;
        self.limit.freed.notify_one();
    }
}

fn read_api_key(var: &str) -> Result<String> {
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!(
            "API key environment variable {var} is not set"
        ))),
    }
}

#[derive(Clone)]
struct Transport {
    agent: ureq::Agent,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    limit: Arc<ConcurrencyLimit>,
}

impl Transport {
    fn new(timeout: Duration, api_key: Option<String>, max_retries: u32, backoff: Duration, concurrency: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Transport {
            agent,
            api_key,
            max_retries,
            backoff,
            limit: Arc::new(ConcurrencyLimit::new(concurrency)),
        }
    }

    /// Posts `body`, retrying transient failures. Returns the parsed body and
    /// the number of retries used.
    fn post(&self, url: &str, body: &Value) -> Result<(Value, u32)> {
        let mut retries = 0;
        loop {
            let outcome = {
                let _permit = self.limit.acquire();
                self.post_once(url, body)
            };
            match outcome {
                Ok(v) => return Ok((v, retries)),
                Err(e) if e.is_transient() && retries < self.max_retries => {
                    let delay = self.backoff.saturating_mul(1u32 << retries.min(16));
                    debug!("retrying {url} in {delay:?}: {e}");
                    thread::sleep(delay);
                    retries += 1;
                }
                Err(e) => {
                    if e.is_transient() {
                        warn!("giving up on {url} after {retries} retries: {e}");
                    }
                    return Err(e);
                }
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("{url}: reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Error::Transport(format!("{url}: malformed JSON: {e}"))),
            429 | 500..=599 => Err(Error::Transport(format!("{url}: HTTP {status}"))),
            _ => Err(Error::Config(format!("{url}: HTTP {status}: {}", truncate(&text, 200)))),
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{path}", base.trim_end_matches('/'))
}

/// Chat-completions generator.
#[derive(Clone)]
pub struct HttpGenerator {
    endpoint_url: String,
    model_name: String,
    transport: Transport,
}

impl HttpGenerator {
    /// Reads the API key from the environment variable named in `config`.
    pub fn from_env(config: &GenerationConfig) -> Result<Self> {
        let key = read_api_key(&config.api_key_env)?;
        Ok(Self::with_api_key(config, Some(key)))
    }

    pub fn with_api_key(config: &GenerationConfig, api_key: Option<String>) -> Self {
        HttpGenerator {
            endpoint_url: config.endpoint_url.clone(),
            model_name: config.model_name.clone(),
            transport: Transport::new(
                config.timeout,
                api_key,
                config.max_retries,
                config.retry_backoff,
                config.max_concurrent_requests,
            ),
        }
    }
}

impl Generator for HttpGenerator {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn generate(&self, prompt: &str, config: &GenerationConfig, _seed: u64) -> Result<Generation> {
        let body = json!({
            "model": self.model_name,
            "temperature": config.temperature,
            "max_tokens": config.max_output_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let url = endpoint(&self.endpoint_url, "chat/completions");
        let (reply, retries) = self.transport.post(&url, &body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Transport(format!("{url}: reply has no choices[0].message.content")))?;
        Ok(Generation {
            text: text.to_owned(),
            retries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub batch_size: usize,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub retry_backoff: Duration,
    pub max_concurrent_requests: usize,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "text-embedding-ada-002".into(),
            batch_size: 100,
            timeout: Duration::from_secs(60),
            max_retries: 5,
            retry_backoff: Duration::from_millis(500),
            max_concurrent_requests: 4,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

/// Embeddings-endpoint client. Batches transparently.
#[derive(Clone)]
pub struct HttpEmbedder {
    endpoint_url: String,
    model_name: String,
    batch_size: usize,
    transport: Transport,
}

impl HttpEmbedder {
    pub fn from_env(config: &EmbedderConfig) -> Result<Self> {
        let key = read_api_key(&config.api_key_env)?;
        Ok(Self::with_api_key(config, Some(key)))
    }

    pub fn with_api_key(config: &EmbedderConfig, api_key: Option<String>) -> Self {
        HttpEmbedder {
            endpoint_url: config.endpoint_url.clone(),
            model_name: config.model_name.clone(),
            batch_size: config.batch_size.max(1),
            transport: Transport::new(
                config.timeout,
                api_key,
                config.max_retries,
                config.retry_backoff,
                config.max_concurrent_requests,
            ),
        }
    }

    fn embed_chunk(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let url = endpoint(&self.endpoint_url, "embeddings");
        let body = json!({"model": self.model_name, "input": texts});
        let (reply, _) = self.transport.post(&url, &body).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Embedding(other.to_string()),
        })?;
        let reply: EmbeddingReply = serde_json::from_value(reply)
            .map_err(|e| Error::Embedding(format!("{url}: malformed reply: {e}")))?;
        if reply.data.len() != texts.len() {
            return Err(Error::Consistency(format!(
                "{url}: {} embeddings for {} inputs",
                reply.data.len(),
                texts.len()
            )));
        }
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in reply.data.into_iter().enumerate() {
            let slot = item.index.unwrap_or(pos);
            match rows.get_mut(slot) {
                Some(r @ None) => *r = Some(item.embedding),
                _ => return Err(Error::Consistency(format!("{url}: bad or repeated index {slot}"))),
            }
        }
        Ok(rows.into_iter().map(|r| r.expect("all slots filled")).collect())
    }
}

impl Embedder for HttpEmbedder {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.embed_chunk(chunk)?);
        }
        Ok(out)
    }
}
