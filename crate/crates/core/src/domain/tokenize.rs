//! Shared text tokenization and the run-level token vocabulary.
//!
//! One rule everywhere: lowercase, split on whitespace and punctuation,
//! keep alphanumeric runs. The evaluation metrics and the trajectory
//! token sequences both use it, so scores and policy inputs stay
//! comparable across the engine.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Reserved token for words outside the vocabulary, always id 0.
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased alphanumeric word tokens of a text.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Fixed token-id assignment built once per run from the produced corpus.
///
/// Ids are assigned in first-encounter order over the build input, so the
/// mapping is deterministic given a deterministic corpus ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::empty();
        for text in texts {
            for token in tokenize(text) {
                vocab.intern(token);
            }
        }
        vocab
    }

    fn empty() -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.intern(UNK_TOKEN.to_string());
        vocab
    }

    fn intern(&mut self, token: String) -> u32 {
        if let Some(id) = self.index.get(&token) {
            return *id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Token ids of `text`; unknown words map to [`UNK_TOKEN`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(0))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        // The unk entry is always present.
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_on_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("The cat, sat-on THE mat."),
            vec!["the", "cat", "sat", "on", "the", "mat"]
        );
        assert_eq!(tokenize("  ...  "), Vec::<String>::new());
    }

    #[test]
    fn vocabulary_assigns_stable_ids() {
        let vocab = Vocabulary::build(["right pneumothorax", "no pneumothorax"]);
        assert_eq!(vocab.tokens()[0], UNK_TOKEN);
        let a = vocab.encode("right pneumothorax");
        let b = vocab.encode("right pneumothorax");
        assert_eq!(a, b);
        assert_eq!(vocab.encode("unseen"), vec![0]);
    }

    #[test]
    fn vocabulary_round_trips_through_serde() {
        let vocab = Vocabulary::build(["alpha beta", "gamma alpha"]);
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.encode("beta gamma"), vocab.encode("beta gamma"));
    }
}
