//! Shared tokenization, vocabulary and sequence conventions.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, then split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Token ↔ index bijection with reserved PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over the given words (reserved entries are prepended).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_token_list(tokens)
    }

    fn from_token_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Tokens with corpus frequency ≥ `min_freq`, sorted by descending
    /// frequency then alphabetically.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(kept.into_iter().map(|(t, _)| t))
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whether a decoder may emit this index (everything but PAD and BOS).
    pub fn is_emittable(id: usize) -> bool {
        id != PAD && id != BOS
    }

    /// `BOS w₁ … wₙ EOS`; words beyond `max_words` are dropped.
    pub fn encode(&self, text: &str, max_words: usize) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(tokenize(text).iter().take(max_words).map(|t| self.id(t)));
        out.push(EOS);
        out
    }

    /// Words between BOS and the first EOS, joined by spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .skip_while(|i| **i == BOS)
            .take_while(|i| **i != EOS)
            .filter(|i| **i != PAD)
            .map(|i| self.token(*i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The scored targets of a `BOS … EOS` sequence: every token after BOS up to
/// and including the first EOS. Padding after EOS is ignored.
pub fn scored_targets(tokens: &[usize], max_steps: usize) -> Result<&[usize]> {
    if tokens.first() != Some(&BOS) {
        return Err(Error::Argument("sequence must start with BOS".into()));
    }
    let eos = tokens
        .iter()
        .position(|t| *t == EOS)
        .ok_or_else(|| Error::Argument("sequence has no EOS".into()))?;
    if eos > max_steps + 1 {
        return Err(Error::Argument(format!(
            "sequence has {} words, more than max_steps = {max_steps}",
            eos - 1
        )));
    }
    Ok(&tokens[1..=eos])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization_is_lowercase_and_punctuation_free() {
        assert_eq!(tokenize("Red, CIRCLES on-the left!"), vec!["red", "circles", "on", "the", "left"]);
        assert!(tokenize("<pad> <bos>").iter().all(|t| !t.contains('<')));
    }

    #[test]
    fn vocabulary_min_frequency_and_unk() {
        let v = Vocabulary::build(["red circles", "red squares", "blue circles"], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("blue"), UNK);
        assert_eq!(v.decode(&v.encode("red circles now", 15)), "red circles <unk>");
    }

    #[test]
    fn targets_stop_at_first_eos() {
        let seq = [BOS, 5, 6, EOS, PAD, 9];
        assert_eq!(scored_targets(&seq, 15).unwrap(), &[5, 6, EOS]);
        assert!(scored_targets(&[5, EOS], 15).is_err());
        assert!(scored_targets(&[BOS, 5, 5, 5, EOS], 2).is_err());
    }
}
