use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Reserved embedding rows for out-of-vocabulary tokens.
pub const OOV_BUCKETS: usize = 64;

/// Words always present so the context initialization phrase and the
/// generic object word have real rows.
const BASE_WORDS: [&str; 4] = ["a", "photo", "of", "object"];

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercase whitespace vocabulary. Ids `0..len` are known words in sorted
/// order; ids `len..len + OOV_BUCKETS` are hash buckets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
        for t in texts {
            set.extend(split(t));
        }
        Self::from_words(set.into_iter().collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Rows needed in an embedding table covering every id.
    pub fn table_rows(&self) -> usize {
        self.words.len() + OOV_BUCKETS
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn id(&self, token: &str) -> usize {
        let t = token.to_lowercase();
        match self.index.get(&t) {
            Some(&i) => i,
            None => self.words.len() + (fnv1a64(t.as_bytes()) % OOV_BUCKETS as u64) as usize,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text.split_whitespace().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Validation("cannot tokenize empty text".into()));
        }
        Ok(ids)
    }

    /// One word per line.
    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.split_whitespace().count() != 1 || *w != w.to_lowercase() {
                return Err(Error::parse("vocab", i + 1, format!("invalid vocabulary word {w:?}")));
            }
        }
        if words.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Validation("vocabulary words must be sorted and unique".into()));
        }
        Ok(Self::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_tokens_are_in_vocabulary() {
        let v = Vocab::build(["old", "car"]);
        let ids = v.tokenize("a photo of old car").unwrap();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|&i| i < v.len()));
        assert_eq!(ids, v.tokenize("A  Photo of OLD car").unwrap());
    }

    #[test]
    fn unknown_words_hash_to_a_stable_bucket() {
        let v = Vocab::build(["old car"]);
        let a = v.id("zebra");
        assert!(a >= v.len() && a < v.table_rows());
        assert_eq!(a, v.len() + (fnv1a64(b"zebra") % 64) as usize);
        assert_eq!(a, v.id("zebra"));
    }

    #[test]
    fn empty_text_is_rejected_and_text_round_trips() {
        let v = Vocab::build(["wet shoe"]);
        assert!(matches!(v.tokenize("   "), Err(Error::Validation(_))));
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
