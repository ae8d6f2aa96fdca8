//! Whitespace tokenizer over a fixed, line-oriented vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::palette::{vocabulary_words, PLACEHOLDER};

/// Token id ↔ string table. Id `i` is line `i` of the vocabulary file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.split_whitespace().count() != 1 {
                return Err(Error::format("vocabulary", format!("line {}: bad token {w:?}", i + 1)));
            }
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {w:?}")));
            }
        }
        if !ids.contains_key(PLACEHOLDER) {
            return Err(Error::format("vocabulary", format!("missing {PLACEHOLDER}")));
        }
        Ok(Vocab { words, ids })
    }

    /// The vocabulary of the synthetic prompt grammar.
    pub fn toy() -> Self {
        Self::from_words(vocabulary_words()).expect("built-in vocabulary is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::UnknownTokenId(id))
    }

    pub fn placeholder(&self) -> usize {
        self.ids[PLACEHOLDER]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}
