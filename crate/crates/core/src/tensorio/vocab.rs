use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensorio::RewardLexicon;

/// Word-level vocabulary with a stable id assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref().to_string();
            if v.index.contains_key(&w) {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
            v.index.insert(w.clone(), v.words.len() as u32);
            v.words.push(w);
        }
        Ok(v)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref()).ok_or_else(|| {
                    Error::invalid(format!("word {:?} not in vocabulary", w.as_ref()))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).to_string()).collect()
    }

    /// Lexicon value of each vocabulary id, 0 for words outside the lexicon.
    pub fn values(&self, lexicon: &RewardLexicon) -> Vec<f64> {
        self.words
            .iter()
            .map(|w| lexicon.value_or_zero(w))
            .collect()
    }
}
