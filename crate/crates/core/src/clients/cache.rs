//! On-disk cache of sample sets and their embeddings.
//!
//! Layout under the cache directory:
//!
//! * `samples/<key>.json`: `{key, prompt, config_digest, responses, created_at, provenance}`
//! * `embeddings/<key>-<model digest>.json`: `{key, embedding_model, embeddings}`
//!
//! `<key>` is [`super::cache_key`]. Credentials are never written.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{GenerationConfig, Provenance, SampleSet};
use crate::error::{Error, Result};
use crate::seed;
use crate::statistics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedSamples {
    pub key: String,
    pub prompt: String,
    pub config_digest: String,
    pub responses: Vec<String>,
    pub created_at: u64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CachedEmbeddings {
    key: String,
    embedding_model: String,
    embeddings: Matrix,
}

pub fn config_digest(config: &GenerationConfig) -> String {
    let canonical = serde_json::json!({
        "model": config.model_name,
        "temperature_bits": config.temperature.to_bits(),
        "max_output_tokens": config.max_output_tokens,
        "n": config.sample_count_n,
    });
    seed::digest_hex(canonical.to_string())
}

#[derive(Debug)]
pub struct SampleCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SampleCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        for sub in ["samples", "embeddings"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(SampleCache {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("poisoned")
            .entry(key.to_owned())
            .or_default()
            .clone()
    }

    fn samples_path(&self, key: &str) -> PathBuf {
        self.dir.join("samples").join(format!("{key}.json"))
    }

    fn embeddings_path(&self, key: &str, model: &str) -> PathBuf {
        let model_digest = &seed::digest_hex(model)[..16];
        self.dir.join("embeddings").join(format!("{key}-{model_digest}.json"))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
        match fs::read_to_string(path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(value)?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_samples(&self, key: &str) -> Result<Option<SampleSet>> {
        let cached: Option<CachedSamples> = Self::read_json(&self.samples_path(key))?;
        Ok(cached.map(|c| SampleSet {
            prompt: c.prompt,
            responses: c.responses,
            embeddings: None,
            provenance: c.provenance,
        }))
    }

    pub fn store_samples(&self, key: &str, config: &GenerationConfig, samples: &SampleSet) -> Result<()> {
        let record = CachedSamples {
            key: key.to_owned(),
            prompt: samples.prompt.clone(),
            config_digest: config_digest(config),
            responses: samples.responses.clone(),
            created_at: samples.provenance.created_at,
            provenance: samples.provenance.clone(),
        };
        Self::write_json(&self.samples_path(key), &record)
    }

    /// Returns the cached sample set for `key`, or runs `draw` and stores its
    /// result. Concurrent callers with the same key wait for one another.
    pub fn samples_or_else(
        &self,
        key: &str,
        config: &GenerationConfig,
        draw: impl FnOnce() -> Result<SampleSet>,
    ) -> Result<SampleSet> {
        let lock = self.lock_for(key);
        let _guard = lock.lock().expect("poisoned");
        if let Some(hit) = self.load_samples(key)? {
            return Ok(hit);
        }
        let fresh = draw()?;
        self.store_samples(key, config, &fresh)?;
        Ok(fresh)
    }

    /// Cached embeddings of the responses stored under `key`, or `embed()`.
    pub fn embeddings_or_else(
        &self,
        key: &str,
        embedding_model: &str,
        embed: impl FnOnce() -> Result<Matrix>,
    ) -> Result<Matrix> {
        let lock_key = format!("{key}/{embedding_model}");
        let lock = self.lock_for(&lock_key);
        let _guard = lock.lock().expect("poisoned");
        let path = self.embeddings_path(key, embedding_model);
        if let Some(hit) = Self::read_json::<CachedEmbeddings>(&path)? {
            return Ok(hit.embeddings);
        }
        let fresh = embed()?;
        Self::write_json(
            &path,
            &CachedEmbeddings {
                key: key.to_owned(),
                embedding_model: embedding_model.to_owned(),
                embeddings: fresh.clone(),
            },
        )?;
        Ok(fresh)
    }
}
