//! Substitute tokens for perturbing a prompt.
//!
//! Three providers: a static JSON table (`{"token": ["n1", "n2", ...]}`), a
//! k-nearest-neighbour search over an embedded lexicon, and a synonym query
//! sent to the generator itself.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clients::{embed, Embedder, GenerationConfig, Generator};
use crate::error::{Error, Result};
use crate::seed;
use crate::statistics::{pairwise_distances, DistanceMetric, Matrix};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    StaticTable,
    EmbeddingKnn,
    GeneratorSynonyms,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::StaticTable => "static_table",
            ProviderKind::EmbeddingKnn => "embedding_knn",
            ProviderKind::GeneratorSynonyms => "generator_synonyms",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub token: String,
    /// Distance between the embeddings of the source token and this one.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub source_token: String,
    pub neighbors: Vec<Neighbor>,
    pub provider: ProviderKind,
}

impl NeighborSet {
    pub fn empty(source_token: &str, provider: ProviderKind) -> Self {
        NeighborSet {
            source_token: source_token.to_owned(),
            neighbors: Vec::new(),
            provider,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.token.as_str())
    }

    /// Drops candidates equal to the source (ignoring case), empty strings and
    /// repeats, keeping the first `k` in order.
    fn from_candidates<I>(source_token: &str, candidates: I, k: usize, provider: ProviderKind) -> Self
    where
        I: IntoIterator<Item = Neighbor>,
    {
        let source = source_token.to_lowercase();
        let mut seen = HashSet::new();
        let neighbors = candidates
            .into_iter()
            .filter(|n| !n.token.is_empty())
            .filter(|n| {
                let folded = n.token.to_lowercase();
                folded != source && seen.insert(folded)
            })
            .take(k)
            .collect();
        NeighborSet {
            source_token: source_token.to_owned(),
            neighbors,
            provider,
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    Ok(())
}

/// Token → substitutes, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StaticNeighborTable {
    entries: IndexMap<String, Vec<String>>,
}

impl StaticNeighborTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
            .map_err(|e| Error::Config(format!("neighbor table {}: {e}", path.display())))
    }

    /// Parses a flat JSON object of string lists. A key given twice keeps its
    /// first position and its last value.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("expected a JSON object of token → list".into()));
        };
        let mut entries = IndexMap::with_capacity(map.len());
        for (key, list) in map {
            let Value::Array(items) = list else {
                return Err(Error::Config(format!("entry {key:?} is not a list")));
            };
            let words = items
                .into_iter()
                .map(|item| match item {
                    Value::String(s) => Ok(s),
                    other => Err(Error::Config(format!("entry {key:?} has non-string item {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if words.is_empty() {
                return Err(Error::Config(format!("entry {key:?} has an empty list")));
            }
            entries.insert(key, words);
        }
        Ok(StaticNeighborTable { entries })
    }

    pub fn from_entries(entries: IndexMap<String, Vec<String>>) -> Result<Self> {
        if let Some((key, _)) = entries.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("entry {key:?} has an empty list")));
        }
        Ok(StaticNeighborTable { entries })
    }

    pub fn entries(&self) -> &IndexMap<String, Vec<String>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact key first, then the first key equal ignoring case.
    pub fn get(&self, token: &str) -> Option<&[String]> {
        if let Some(v) = self.entries.get(token) {
            return Some(v);
        }
        let folded = token.to_lowercase();
        self.entries
            .iter()
            .find(|(key, _)| key.to_lowercase() == folded)
            .map(|(_, v)| v.as_slice())
    }

    /// Up to `k` neighbours of `token`; empty when the table has no entry.
    pub fn lookup(&self, token: &str, k: usize) -> NeighborSet {
        let candidates = self.get(token).unwrap_or_default().iter().map(|t| Neighbor {
            token: t.clone(),
            distance: None,
        });
        NeighborSet::from_candidates(token, candidates, k, ProviderKind::StaticTable)
    }
}

/// Embedded, deduplicated lexicon for nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    lexicon: Vec<String>,
    embeddings: Matrix,
    metric: DistanceMetric,
}

impl KnnIndex {
    pub fn build(lexicon: &[String], embedder: &dyn Embedder, metric: DistanceMetric) -> Result<Self> {
        let mut seen = HashSet::new();
        let lexicon: Vec<String> = lexicon
            .iter()
            .filter(|w| !w.is_empty() && seen.insert(w.as_str()))
            .cloned()
            .collect();
        if lexicon.is_empty() {
            return Err(Error::Argument("lexicon is empty".into()));
        }
        let embeddings = embed(embedder, &lexicon)?;
        Ok(KnnIndex {
            lexicon,
            embeddings,
            metric,
        })
    }

    /// Reads one candidate per non-empty line.
    pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Vec<String>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect())
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    /// The `k` lexicon entries closest to `token`, nearest first; equal
    /// distances keep lexicon order.
    pub fn query(&self, token: &str, embedder: &dyn Embedder, k: usize) -> Result<NeighborSet> {
        check_k(k)?;
        let query = embed(embedder, &[token.to_owned()])?;
        let distances = pairwise_distances(&query, &self.embeddings, self.metric)?;
        let mut order: Vec<usize> = (0..self.lexicon.len()).collect();
        order.sort_by(|&a, &b| distances.get(0, a).total_cmp(&distances.get(0, b)));
        let candidates = order.into_iter().map(|j| Neighbor {
            token: self.lexicon[j].clone(),
            distance: Some(distances.get(0, j)),
        });
        Ok(NeighborSet::from_candidates(token, candidates, k, ProviderKind::EmbeddingKnn))
    }
}

pub fn knn_neighbors(
    token: &str,
    lexicon: &[String],
    embedder: &dyn Embedder,
    k: usize,
    metric: DistanceMetric,
) -> Result<NeighborSet> {
    check_k(k)?;
    KnnIndex::build(lexicon, embedder, metric)?.query(token, embedder, k)
}

pub const SYNONYM_TEMPLATE_VERSION: u32 = 1;

const SYNONYM_TEMPLATE: &str = "List exactly {k} single-word synonyms for the word \"{token}\" \
as it is used in the following text. Reply with the synonyms only, comma-separated, \
no explanations.\n\nText: {context}";

const SYNONYM_ATTEMPTS: u64 = 3;

pub fn synonym_prompt(token: &str, context: &str, k: usize) -> String {
    SYNONYM_TEMPLATE
        .replace("{k}", &k.to_string())
        .replace("{token}", token)
        .replace("{context}", context)
}

static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:[-*•]+|\(?\d+[.):])\s*").expect("valid"));

/// Splits a reply on newlines and commas and cleans each item of list
/// markers, quotes and a trailing period. Items containing whitespace are
/// discarded, which also drops preambles such as "Here are three synonyms:".
pub fn parse_synonym_reply(reply: &str) -> Vec<String> {
    reply
        .split(['\n', ','])
        .filter_map(|raw| {
            let item = LIST_MARKER.replace(raw.trim(), "");
            let item = item.trim().trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”'));
            let item = match item.strip_suffix('.') {
                Some(rest) if !rest.is_empty() => rest,
                _ => item,
            };
            (!item.is_empty() && !item.contains(char::is_whitespace)).then(|| item.to_owned())
        })
        .collect()
}

/// Asks `generator` for synonyms of `token` in `context`. Up to three
/// attempts; attempt `a` uses seed `derive_indexed(seed, "synonyms", a)`.
pub fn synonym_neighbors(
    token: &str,
    context: &str,
    generator: &dyn Generator,
    config: &GenerationConfig,
    k: usize,
    seed: u64,
) -> Result<NeighborSet> {
    check_k(k)?;
    let prompt = synonym_prompt(token, context, k);
    let mut last_problem = String::new();
    for attempt in 0..SYNONYM_ATTEMPTS {
        let draw_seed = seed::derive_indexed(seed, "synonyms", attempt);
        match generator.generate(&prompt, config, draw_seed) {
            Ok(reply) => {
                let candidates = parse_synonym_reply(&reply.text).into_iter().map(|t| Neighbor {
                    token: t,
                    distance: None,
                });
                let set = NeighborSet::from_candidates(token, candidates, k, ProviderKind::GeneratorSynonyms);
                if !set.is_empty() {
                    return Ok(set);
                }
                last_problem = format!("unparseable reply {:?}", reply.text);
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => last_problem = e.to_string(),
        }
    }
    Err(Error::NeighborAcquisition {
        token: token.to_owned(),
        reason: format!("{SYNONYM_ATTEMPTS} attempts failed; last: {last_problem}"),
    })
}

/// Fills in missing neighbour distances as the L2 norm between embeddings.
pub fn with_embedding_distances(mut set: NeighborSet, embedder: &dyn Embedder) -> Result<NeighborSet> {
    if set.neighbors.iter().all(|n| n.distance.is_some()) {
        return Ok(set);
    }
    let mut texts = vec![set.source_token.clone()];
    texts.extend(set.neighbors.iter().map(|n| n.token.clone()));
    let m = embed(embedder, &texts)?;
    let source = m.row(0);
    for (i, n) in set.neighbors.iter_mut().enumerate() {
        if n.distance.is_none() {
            n.distance = Some(DistanceMetric::L2.distance(source, m.row(i + 1)));
        }
    }
    Ok(set)
}

/// A configured neighbour provider.
#[derive(Debug, Clone)]
pub enum NeighborSource {
    StaticTable(StaticNeighborTable),
    EmbeddingKnn(KnnIndex),
    GeneratorSynonyms,
}

impl NeighborSource {
    pub fn kind(&self) -> ProviderKind {
        match self {
            NeighborSource::StaticTable(_) => ProviderKind::StaticTable,
            NeighborSource::EmbeddingKnn(_) => ProviderKind::EmbeddingKnn,
            NeighborSource::GeneratorSynonyms => ProviderKind::GeneratorSynonyms,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn neighbors(
        &self,
        token: &str,
        context: &str,
        generator: &dyn Generator,
        embedder: &dyn Embedder,
        config: &GenerationConfig,
        k: usize,
        seed: u64,
    ) -> Result<NeighborSet> {
        check_k(k)?;
        match self {
            NeighborSource::StaticTable(table) => Ok(table.lookup(token, k)),
            NeighborSource::EmbeddingKnn(index) => index.query(token, embedder, k),
            NeighborSource::GeneratorSynonyms => synonym_neighbors(token, context, generator, config, k, seed),
        }
    }
}
