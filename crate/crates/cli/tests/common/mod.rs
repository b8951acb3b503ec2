#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dbsa::clients::mock::{
    MockEmbedder, MockGenerator, MockGeneratorSpec, MockRule, MockSpec, PromptMatcher, WeightedResponse,
};
use dbsa::neighbors::{NeighborSource, StaticNeighborTable};

pub const CARDIAC: [&str; 8] = ["cardiac", "edema", "diuretic", "fluid", "ventricle", "dyspnea", "overload", "ejection"];
pub const ROUTINE: [&str; 8] = ["routine", "checkup", "wellness", "exercise", "diet", "sleep", "hydration", "vitamins"];

/// A prompt in which only "congestive" matters to the planted generator.
pub const PLANTED_PROMPT: &str = "The patient shows congestive heart failure with mild swelling.";

pub const PLANTED_TABLE: &str = r#"{
  "The": ["A", "This", "One"],
  "patient": ["client", "man", "woman"],
  "shows": ["displays", "has", "presents"],
  "congestive": ["chronic", "acute", "severe"],
  "heart": ["cardiac", "coronary", "valve"],
  "failure": ["disease", "trouble", "weakness"],
  "with": ["plus", "alongside", "including"],
  "mild": ["slight", "minor", "light"],
  "swelling": ["edema", "puffiness", "bloating"],
  ".": ["!", ";", "?"]
}"#;

/// Prompt whose tokens each move a different share of the response mass.
pub const GRADED_PROMPT: &str = "check valve pressure before opening the drain line";

pub const GRADED_TOKENS: [&str; 8] = ["check", "valve", "pressure", "before", "opening", "the", "drain", "line"];

pub const GRADED_TABLE: &str = r#"{
  "check": ["inspect", "verify"],
  "valve": ["tap", "faucet"],
  "pressure": ["force", "load"],
  "before": ["prior", "ahead"],
  "opening": ["unsealing", "releasing"],
  "the": ["a", "this"],
  "drain": ["outlet", "sewer"],
  "line": ["pipe", "hose"]
}"#;

/// Single words and pairs from `vocab`, 30 distinct responses, equal weight.
pub fn word_responses(vocab: &[&str]) -> Vec<WeightedResponse> {
    let mut texts: Vec<String> = vocab.iter().map(|w| (*w).to_owned()).collect();
    for (i, a) in vocab.iter().enumerate() {
        for b in &vocab[i + 1..] {
            texts.push(format!("{a} {b}"));
        }
    }
    texts.truncate(30);
    texts.into_iter().map(|text| WeightedResponse { text, weight: 1.0 }).collect()
}

fn scaled(mut responses: Vec<WeightedResponse>, total: f64) -> Vec<WeightedResponse> {
    let each = total / responses.len() as f64;
    for r in &mut responses {
        r.weight = each;
    }
    responses
}

pub fn embedder() -> MockEmbedder {
    MockEmbedder::new(CARDIAC.iter().chain(&ROUTINE).copied())
}

/// Cardiac responses while "congestive" is present, routine ones otherwise.
pub fn planted_spec(model_name: &str) -> MockSpec {
    MockSpec {
        generator: MockGeneratorSpec {
            model_name: model_name.into(),
            rules: vec![
                MockRule {
                    when: PromptMatcher::ContainsToken("congestive".into()),
                    responses: word_responses(&CARDIAC),
                },
                MockRule { when: PromptMatcher::Any, responses: word_responses(&ROUTINE) },
            ],
        },
        embedder: embedder(),
    }
}

/// Ignores the prompt entirely.
pub fn null_spec() -> MockSpec {
    MockSpec {
        generator: MockGeneratorSpec {
            model_name: "mock-null".into(),
            rules: vec![MockRule { when: PromptMatcher::Any, responses: word_responses(&CARDIAC) }],
        },
        embedder: embedder(),
    }
}

/// Replacing the i-th graded token moves i/7 of the mass from the cardiac
/// cluster to the routine one.
pub fn graded_spec(model_name: &str) -> MockSpec {
    let last = (GRADED_TOKENS.len() - 1) as f64;
    let mut rules: Vec<MockRule> = GRADED_TOKENS
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let shifted = i as f64 / last;
            let mut responses = scaled(word_responses(&CARDIAC), 1.0 - shifted + 1e-9);
            responses.extend(scaled(word_responses(&ROUTINE), shifted + 1e-9));
            MockRule { when: PromptMatcher::MissingToken((*token).into()), responses }
        })
        .collect();
    rules.push(MockRule { when: PromptMatcher::Any, responses: word_responses(&CARDIAC) });
    MockSpec {
        generator: MockGeneratorSpec { model_name: model_name.into(), rules },
        embedder: embedder(),
    }
}

pub fn generator(spec: &MockSpec) -> MockGenerator {
    MockGenerator::new(spec.generator.clone()).expect("valid mock")
}

pub fn static_source(table: &str) -> NeighborSource {
    NeighborSource::StaticTable(StaticNeighborTable::from_json_str(table).expect("valid table"))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> PathBuf {
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("serializable")).expect("writable");
    path.to_owned()
}
