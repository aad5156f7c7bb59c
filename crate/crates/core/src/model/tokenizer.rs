use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::prompting::SEPARATOR;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;
/// The decoder starts from the pad token.
pub const DECODER_START: usize = PAD;

const SPECIALS: [&str; 4] = ["<pad>", "</s>", "<unk>", SEPARATOR];

/// Whitespace word-level vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for WordTokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl From<Vec<String>> for WordTokenizer {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordTokenizer { words, index }
    }
}

impl From<WordTokenizer> for Vec<String> {
    fn from(t: WordTokenizer) -> Self {
        t.words
    }
}

impl WordTokenizer {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let specials: BTreeSet<&str> = SPECIALS.into_iter().collect();
        let mut words: BTreeSet<&str> = BTreeSet::new();
        for text in texts {
            words.extend(text.split_whitespace().filter(|w| !specials.contains(w)));
        }
        let all: Vec<String> = SPECIALS.iter().copied().chain(words).map(str::to_string).collect();
        WordTokenizer::from(all)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }

    /// Joins the words of `ids`, skipping pad and end-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS)
            .map(|&i| self.words.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
