//! Character vocabulary with a frequency cutoff.

use std::collections::{BTreeMap, HashMap};

use crate::error::{LmError, Result};

pub const UNK: &str = "<unk>";

/// Characters seen at least `min_count` times, ordered by descending count
/// then ascending code point. Everything else maps to the trailing unk id.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    min_count: usize,
}

pub fn build_vocab(text: &str, min_count: usize) -> Result<CharVocab> {
    if text.is_empty() {
        return Err(LmError::Ingestion("empty corpus".into()));
    }
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
    }
    let mut kept: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(CharVocab::from_chars(kept.into_iter().map(|(c, _)| c).collect(), min_count))
}

impl CharVocab {
    /// A vocabulary with ids `0..chars.len()` in the given order.
    pub fn from_chars(chars: Vec<char>, min_count: usize) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharVocab { chars, index, min_count }
    }

    /// Number of ids, including unk.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk_id(&self) -> usize {
        self.chars.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.unk_id())
    }

    /// `None` for unk and out-of-range ids.
    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Unk decodes to U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.char_of(i).unwrap_or('\u{FFFD}')).collect()
    }
}
