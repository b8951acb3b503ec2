//! Prompt tokenization for perturbation scoring.
//!
//! Tokens are the non-overlapping, left-to-right matches of a single
//! pattern with three alternatives:
//!
//! 1. a number with an optional leading `$`, optional `,`-separated digit
//!    groups and an optional decimal part (`$10`, `1,250,000`, `3.5`);
//! 2. a run of word characters;
//! 3. any single character that is neither a word character nor whitespace.
//!
//! Word characters follow the Unicode-aware `\w` class of the `regex` crate.
//! Whitespace is never a token; each token keeps its byte span so the original
//! spacing can be restored when rendering.

use std::ops::Range;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

const TOKEN_PATTERN: &str = r"\$?\d+(?:,\d+)*(?:\.\d+)?|\w+|[^\w\s]";

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(TOKEN_PATTERN).expect("token pattern compiles"));

/// One matched token and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// A prompt split into tokens, with an index from each unique token to the
/// positions where it occurs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    raw_text: String,
    tokens: Vec<Token>,
    unique_index: IndexMap<String, Vec<usize>>,
}

impl TokenizedPrompt {
    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_strings(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Unique tokens in first-occurrence order, each with its 0-based
    /// positions. Matching is case-sensitive.
    pub fn unique_index(&self) -> &IndexMap<String, Vec<usize>> {
        &self.unique_index
    }

    /// Text between the end of token `position - 1` (or the start of the
    /// prompt) and the start of token `position`.
    pub fn leading_gap(&self, position: usize) -> &str {
        let start = if position == 0 {
            0
        } else {
            self.tokens[position - 1].span.end
        };
        &self.raw_text[start..self.tokens[position].span.start]
    }

    /// Text after the final token.
    pub fn trailing_gap(&self) -> &str {
        let start = self.tokens.last().map_or(0, |t| t.span.end);
        &self.raw_text[start..]
    }

    /// The prompt with the token at `position` replaced by `replacement`.
    /// All other bytes, including whitespace, are kept verbatim.
    ///
    /// Panics if `position` is out of range.
    pub fn substitute(&self, position: usize, replacement: &str) -> String {
        let span = &self.tokens[position].span;
        let mut out = String::with_capacity(self.raw_text.len() + replacement.len());
        out.push_str(&self.raw_text[..span.start]);
        out.push_str(replacement);
        out.push_str(&self.raw_text[span.end..]);
        out
    }
}

/// Splits `text` into scoreable tokens. Pure; empty input yields no tokens.
pub fn tokenize(text: &str) -> TokenizedPrompt {
    let tokens: Vec<Token> = TOKEN_RE
        .find_iter(text)
        .map(|m| Token {
            text: m.as_str().to_owned(),
            span: m.range(),
        })
        .collect();

    let mut unique_index: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (position, token) in tokens.iter().enumerate() {
        unique_index
            .entry(token.text.clone())
            .or_default()
            .push(position);
    }

    TokenizedPrompt {
        raw_text: text.to_owned(),
        tokens,
        unique_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strings(text: &str) -> Vec<String> {
        tokenize(text)
            .tokens()
            .iter()
            .map(|t| t.text.clone())
            .collect()
    }

    #[test]
    fn currency_stays_whole() {
        assert_eq!(strings("pay $10 million."), ["pay", "$10", "million", "."]);
    }

    #[test]
    fn percent_splits_from_number() {
        assert_eq!(strings("refund 50% now"), ["refund", "50", "%", "now"]);
    }

    #[test]
    fn empty_text() {
        let t = tokenize("");
        assert!(t.is_empty());
        assert!(t.unique_index().is_empty());
    }

    #[test]
    fn repeated_tokens_indexed() {
        let t = tokenize("a b a");
        let index: Vec<_> = t
            .unique_index()
            .iter()
            .map(|(k, v)| (k.as_str(), v.clone()))
            .collect();
        assert_eq!(index, [("a", vec![0, 2]), ("b", vec![1])]);
    }

    #[test]
    fn thousands_separators() {
        assert_eq!(strings("1,250,000"), ["1,250,000"]);
        assert_eq!(strings("1, 250"), ["1", ",", "250"]);
        assert_eq!(strings("$3.50"), ["$3.50"]);
    }

    #[test]
    fn case_sensitive_unique_tokens() {
        let t = tokenize("Company company Company");
        assert_eq!(t.unique_index().len(), 2);
        assert_eq!(t.unique_index()["Company"], vec![0, 2]);
    }

    #[test]
    fn hyphenated_and_possessive() {
        assert_eq!(
            strings("45-year-old B's"),
            ["45", "-", "year", "-", "old", "B", "'", "s"]
        );
    }

    #[test]
    fn substitute_only_touches_one_span() {
        let t = tokenize("a  faulty\tproduct .");
        assert_eq!(t.substitute(1, "defective"), "a  defective\tproduct .");
        assert_eq!(t.leading_gap(2), "\t");
        assert_eq!(t.trailing_gap(), "");
    }

    proptest! {
        #[test]
        fn tokens_cover_all_non_whitespace(text in "\\PC{0,60}") {
            let t = tokenize(&text);
            let mut rebuilt = String::new();
            for (i, tok) in t.tokens().iter().enumerate() {
                let gap = t.leading_gap(i);
                prop_assert!(gap.chars().all(char::is_whitespace));
                rebuilt.push_str(gap);
                rebuilt.push_str(&tok.text);
            }
            prop_assert!(t.trailing_gap().chars().all(char::is_whitespace));
            rebuilt.push_str(t.trailing_gap());
            prop_assert_eq!(rebuilt, text.clone());
            prop_assert_eq!(tokenize(&text), t);
        }

        #[test]
        fn every_position_indexed_once(text in "[a-c ,.$0-9]{0,40}") {
            let t = tokenize(&text);
            let mut seen: Vec<usize> = t.unique_index().values().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..t.len()).collect::<Vec<_>>());
        }
    }
}
