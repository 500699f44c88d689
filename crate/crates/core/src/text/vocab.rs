//! Whitespace-and-punctuation tokenizer over a corpus-built vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Upper bound on the number of trailing embedding tokens.
pub const MAX_SPECIAL: usize = 8;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const USER: u32 = 2;
pub const ASSISTANT: u32 = 3;
pub const SEP: u32 = 4;
const EMB_BASE: u32 = 5;
/// First id available to ordinary words.
pub const FIRST_WORD_ID: u32 = EMB_BASE + MAX_SPECIAL as u32;

/// Id of the embedding token `[EMB_i]`, 1-based.
pub fn emb_id(i: usize) -> u32 {
    assert!((1..=MAX_SPECIAL).contains(&i), "EMB index {i} out of range");
    EMB_BASE + (i - 1) as u32
}

pub fn is_special(id: u32) -> bool {
    id < FIRST_WORD_ID
}

fn special_name(id: u32) -> String {
    match id {
        PAD => "[PAD]".into(),
        UNK => "[UNK]".into(),
        USER => "[USER]".into(),
        ASSISTANT => "[ASSISTANT]".into(),
        SEP => "[SEP]".into(),
        _ => format!("[EMB_{}]", id - EMB_BASE + 1),
    }
}

/// Splits text into lowercase alphanumeric runs; every other non-space
/// character becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_words(r.words)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { words: v.words }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from word frequencies over `texts`, most frequent
    /// first (ties alphabetical), keeping at most `max_words` ordinary words.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_words);
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect())
    }

    /// Ordinary words in id order, starting at [`FIRST_WORD_ID`].
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Total id space including reserved tokens.
    pub fn size(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> String {
        if is_special(id) {
            special_name(id)
        } else {
            self.words
                .get((id - FIRST_WORD_ID) as usize)
                .cloned()
                .unwrap_or_else(|| special_name(UNK))
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
