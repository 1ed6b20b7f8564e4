//! Pluggable language providers with bundled rule-lexicon fallbacks:
//! part-of-speech tagging, dependency depth and word vectors.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Preposition,
    Determiner,
    Conjunction,
    Pronoun,
    Number,
    Other,
}

pub trait Tagger: Sync {
    fn tag(&self, tokens: &[String]) -> Result<Vec<Pos>>;
}

/// Depth of a dependency tree over a tagged caption (root alone = 1).
pub trait DependencyParser: Sync {
    fn depth(&self, tokens: &[String], tags: &[Pos]) -> Result<usize>;
}

pub trait WordVectors: Sync {
    fn dim(&self) -> usize;
    fn vector(&self, word: &str) -> Vec<f32>;
}

const PREPOSITIONS: &[&str] = &[
    "about", "above", "across", "after", "against", "along", "among", "around", "at", "behind", "below", "beneath",
    "beside", "besides", "between", "beyond", "by", "down", "during", "for", "from", "in", "inside", "into", "near",
    "of", "off", "on", "onto", "out", "outside", "over", "past", "through", "throughout", "to", "toward", "towards",
    "under", "underneath", "up", "upon", "via", "with", "within", "without", "atop",
];
const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "all", "both", "either",
    "neither", "no", "another", "such", "many", "few", "several", "most", "more", "much",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor", "yet", "so", "while", "whereas", "as", "if", "than"];
const PRONOUNS: &[&str] = &[
    "it", "its", "they", "them", "their", "he", "she", "his", "her", "him", "we", "us", "our", "you", "your", "i",
    "me", "my", "which", "who", "whom", "whose", "what", "something", "anything", "one",
];
const NUMBERS: &[&str] = &[
    "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "single", "double", "multiple",
];
const ADVERBS: &[&str] = &[
    "very", "mostly", "mainly", "often", "sometimes", "usually", "also", "too", "not", "only", "just", "slightly",
    "partially", "especially", "particularly", "highly", "densely", "here", "there", "together", "apart",
];
const VERBS: &[&str] = &[
    "is", "are", "be", "being", "been", "was", "were", "has", "have", "having", "holding", "wearing", "sitting",
    "standing", "lying", "eating", "running", "looking", "playing", "flying", "swimming", "riding", "walking",
    "hanging", "covered", "surrounded", "filled", "shown", "seen", "made", "containing", "showing", "facing",
    "touching", "reaching", "growing", "floating", "crossing", "carrying", "driving", "jumping", "smiling",
    "moving", "resting", "including", "appear", "appears", "look", "looks", "contain", "contains",
];
const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "orange", "pink", "brown", "black", "white", "gray", "grey", "dark",
    "light", "bright", "pale", "colorful", "colored", "big", "small", "large", "tiny", "huge", "long", "short",
    "tall", "wide", "narrow", "thin", "thick", "round", "square", "rectangular", "circular", "triangular",
    "curved", "straight", "horizontal", "vertical", "diagonal", "striped", "spotted", "checkered", "textured",
    "smooth", "rough", "shiny", "glossy", "metallic", "wooden", "furry", "fuzzy", "soft", "hard", "flat", "high",
    "low", "top", "bottom", "left", "right", "upper", "lower", "middle", "central", "outer", "inner", "front",
    "back", "open", "closed", "empty", "full", "human", "animal", "natural", "old", "new", "young", "same",
    "different", "various", "other", "similar", "repeated", "repeating", "pointed", "sharp", "blurry", "clear",
    "distant", "close", "close-up", "wet", "dry", "hot", "cold", "warm", "golden", "silver", "transparent",
    "geometric", "abstract", "regular", "irregular", "parallel", "dotted", "patterned", "plaid", "grassy",
    "sandy", "rocky", "snowy", "cloudy", "sunny", "indoor", "outdoor", "fluffy", "frontal", "dense", "sparse",
    "generic", "specific",
];
/// Nouns that suffix rules would otherwise mis-tag.
const NOUN_EXCEPTIONS: &[&str] = &[
    "building", "buildings", "ceiling", "clothing", "painting", "paintings", "ring", "rings", "string", "strings",
    "thing", "things", "wing", "wings", "king", "sky", "body", "baby", "city", "jelly", "belly", "family",
    "butterfly", "fly", "bed", "shed", "sled", "head", "bread", "thread", "sled", "reed", "seed", "weed", "animals",
    "evening", "legs", "railing", "lettering", "writing", "fencing", "siding", "sidewalk",
];

fn lookup(word: &str) -> Option<Pos> {
    let is = |list: &[&str]| list.contains(&word);
    if is(NOUN_EXCEPTIONS) {
        Some(Pos::Noun)
    } else if is(PREPOSITIONS) {
        Some(Pos::Preposition)
    } else if is(DETERMINERS) {
        Some(Pos::Determiner)
    } else if is(CONJUNCTIONS) {
        Some(Pos::Conjunction)
    } else if is(PRONOUNS) {
        Some(Pos::Pronoun)
    } else if is(NUMBERS) || word.chars().all(|c| c.is_ascii_digit()) {
        Some(Pos::Number)
    } else if is(ADVERBS) {
        Some(Pos::Adverb)
    } else if is(VERBS) {
        Some(Pos::Verb)
    } else if is(ADJECTIVES) {
        Some(Pos::Adjective)
    } else {
        None
    }
}

/// Rule-lexicon tagger: closed-class word lists, a pinned adjective/verb
/// lexicon, suffix heuristics, and noun as the default open class.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconTagger;

impl LexiconTagger {
    pub fn tag_word(word: &str) -> Pos {
        let w = word.to_lowercase();
        if let Some(p) = lookup(&w) {
            return p;
        }
        if let Some(stem) = w.strip_suffix('s') {
            if let Some(p @ (Pos::Adjective | Pos::Noun)) = lookup(stem) {
                return if p == Pos::Adjective { Pos::Noun } else { p };
            }
        }
        let suffix = |s: &str| w.len() > s.len() + 2 && w.ends_with(s);
        if suffix("ly") {
            Pos::Adverb
        } else if suffix("ing") || suffix("ed") {
            Pos::Verb
        } else if ["ful", "ous", "ish", "ive", "able", "ible", "ic", "al", "less", "ern"].iter().any(|s| suffix(s)) {
            Pos::Adjective
        } else {
            Pos::Noun
        }
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<Pos>> {
        Ok(tokens.iter().map(|t| Self::tag_word(t)).collect())
    }
}

/// Head-rule dependency heuristic. Noun phrases attach their modifiers to the
/// final noun; prepositions and verbs attach to the preceding head and govern
/// the following phrase; coordinated phrases attach to the first conjunct.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadRuleParser;

impl HeadRuleParser {
    /// Parent index of every token (`None` for the root).
    pub fn parents(tags: &[Pos]) -> Vec<Option<usize>> {
        let n = tags.len();
        let mut parent = vec![None; n];
        if n == 0 {
            return parent;
        }
        // Chunk into phrases: a run of modifiers ending in a head noun/pronoun/number.
        let is_mod = |p: Pos| matches!(p, Pos::Determiner | Pos::Adjective | Pos::Adverb | Pos::Number);
        let is_head = |p: Pos| matches!(p, Pos::Noun | Pos::Pronoun);
        let mut phrases: Vec<(usize, usize, usize)> = Vec::new(); // (start, end, head)
        let mut i = 0;
        while i < n {
            if is_mod(tags[i]) || is_head(tags[i]) {
                let start = i;
                while i < n && is_mod(tags[i]) {
                    i += 1;
                }
                while i < n && is_head(tags[i]) {
                    i += 1;
                }
                let end = i;
                phrases.push((start, end, end - 1));
            } else {
                phrases.push((i, i + 1, i));
                i += 1;
            }
        }
        for &(s, e, h) in &phrases {
            for (t, p) in parent.iter_mut().enumerate().take(e).skip(s) {
                if t != h {
                    *p = Some(h);
                }
            }
        }
        let root = phrases
            .iter()
            .find(|(_, _, h)| is_head(tags[*h]))
            .map_or(phrases[0].2, |p| p.2);
        let mut last_nominal = None::<usize>;
        let mut pending: Option<usize> = None; // preposition/verb/conjunction awaiting an object
        for &(_, _, h) in &phrases {
            if h == root {
                last_nominal = Some(root);
                pending = None;
                continue;
            }
            let tag = tags[h];
            match tag {
                Pos::Preposition | Pos::Verb | Pos::Conjunction | Pos::Other => {
                    parent[h] = Some(pending.or(last_nominal).unwrap_or(root));
                    pending = Some(h);
                }
                _ => {
                    let gov = match pending {
                        Some(p) if tags[p] == Pos::Conjunction => parent[p].unwrap_or(root),
                        Some(p) => p,
                        None => last_nominal.unwrap_or(root),
                    };
                    parent[h] = Some(gov);
                    if let Some(p) = pending.filter(|p| tags[*p] == Pos::Conjunction) {
                        parent[p] = Some(h);
                    }
                    last_nominal = Some(h);
                    pending = None;
                }
            }
        }
        parent
    }
}

impl DependencyParser for HeadRuleParser {
    fn depth(&self, tokens: &[String], tags: &[Pos]) -> Result<usize> {
        crate::error::ensure(tokens.len() == tags.len(), || "tokens and tags differ in length".into())?;
        let parent = Self::parents(tags);
        let mut best = 0;
        for start in 0..parent.len() {
            let (mut d, mut cur) = (1, start);
            while let Some(p) = parent[cur] {
                d += 1;
                cur = p;
                if d > parent.len() {
                    break;
                }
            }
            best = best.max(d);
        }
        Ok(best)
    }
}

/// Deterministic character n-gram hashing embeddings.
#[derive(Debug, Clone, Copy)]
pub struct HashedWordVectors {
    pub dim: usize,
}

impl Default for HashedWordVectors {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl WordVectors for HashedWordVectors {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, word: &str) -> Vec<f32> {
        let padded: Vec<u8> = format!("<{}>", word.to_lowercase()).into_bytes();
        let mut v = vec![0f32; self.dim];
        for n in 2..=3 {
            for gram in padded.windows(n) {
                let mut h = fnv1a(gram);
                for _ in 0..4 {
                    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
                    let slot = (h % self.dim as u64) as usize;
                    v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn tags(s: &str) -> Vec<Pos> {
        LexiconTagger.tag(&tokenize(s)).unwrap()
    }

    #[test]
    fn pinned_lexicon_tags() {
        assert_eq!(tags("blue dog"), vec![Pos::Adjective, Pos::Noun]);
        assert_eq!(tags("dogs on the grass"), vec![Pos::Noun, Pos::Preposition, Pos::Determiner, Pos::Noun]);
        assert_eq!(tags("people holding umbrellas"), vec![Pos::Noun, Pos::Verb, Pos::Noun]);
        assert_eq!(LexiconTagger::tag_word("buildings"), Pos::Noun);
        assert_eq!(LexiconTagger::tag_word("colorful"), Pos::Adjective);
    }

    #[test]
    fn parse_depths() {
        let d = |s: &str| {
            let t = tokenize(s);
            HeadRuleParser.depth(&t, &LexiconTagger.tag(&t).unwrap()).unwrap()
        };
        assert_eq!(d("dogs"), 1);
        assert_eq!(d("red dogs"), 2);
        // dogs <- on <- grass <- the
        assert_eq!(d("dogs on the grass"), 4);
        assert!(d("the top of a dog on the grass") > d("dogs on grass"));
        assert_eq!(d(""), 0);
    }

    #[test]
    fn vectors_are_unit_and_deterministic() {
        let wv = HashedWordVectors::default();
        let a = wv.vector("dog");
        assert_eq!(a, wv.vector("dog"));
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert_ne!(a, wv.vector("cat"));
    }
}
