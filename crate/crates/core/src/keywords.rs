//! Token-level keyword matching shared by auditing and editing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::text::tokenize;

/// Keywords for locating text-selective units.
pub const TEXT_KEYWORDS: [&str; 3] = ["text", "word", "letter"];
/// Keywords for face audits.
pub const FACE_KEYWORDS: [&str; 5] = ["face", "head", "nose", "eyes", "mouth"];

/// Lowercase form with one trailing `s` removed.
pub fn singular(token: &str) -> String {
    let t = token.to_lowercase();
    match t.strip_suffix('s') {
        Some(stem) if !stem.is_empty() => stem.to_string(),
        _ => t,
    }
}

/// A keyword set compared against description tokens in singular form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    keywords: Vec<String>,
}

impl KeywordSet {
    pub fn new<I, S>(keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = keywords
            .into_iter()
            .map(|k| k.as_ref().trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        Self {
            keywords: set.into_iter().collect(),
        }
    }

    pub fn text() -> Self {
        Self::new(TEXT_KEYWORDS)
    }

    pub fn faces() -> Self {
        Self::new(FACE_KEYWORDS)
    }

    /// Sorted, deduplicated, lowercase keywords.
    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    /// Keywords matched by some token of `description`, in keyword order.
    pub fn matched(&self, description: &str) -> Vec<String> {
        let forms: BTreeSet<String> = tokenize(description).iter().map(|t| singular(t)).collect();
        self.keywords
            .iter()
            .filter(|k| forms.contains(&singular(k)))
            .cloned()
            .collect()
    }

    pub fn matches(&self, description: &str) -> bool {
        !self.matched(description).is_empty()
    }
}
