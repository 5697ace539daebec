use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Word → sentiment value. Lookups use exact lowercase match.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardLexicon {
    entries: BTreeMap<String, f64>,
}

impl RewardLexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut lex = RewardLexicon::default();
        for (i, (word, value)) in pairs.into_iter().enumerate() {
            lex.insert(word, value).map_err(|message| Error::Parse {
                line: i + 1,
                message,
            })?;
        }
        Ok(lex)
    }

    fn insert(&mut self, word: &str, value: f64) -> std::result::Result<(), String> {
        let word = word.trim().to_lowercase();
        if word.is_empty() {
            return Err("empty word".into());
        }
        if word.chars().any(char::is_whitespace) {
            return Err(format!("word {word:?} contains whitespace"));
        }
        if !value.is_finite() {
            return Err(format!("value for {word:?} is not finite"));
        }
        if self.entries.insert(word.clone(), value).is_some() {
            return Err(format!("duplicate word {word:?}"));
        }
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<f64> {
        self.entries.get(word).copied()
    }

    pub fn value_or_zero(&self, word: &str) -> f64 {
        self.get(word).unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `word<TAB>value` lines in word order.
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(w, v)| format!("{w}\t{v}\n"))
            .collect()
    }
}

pub fn parse_lexicon(text: &str) -> Result<RewardLexicon> {
    let mut lex = RewardLexicon::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim_end_matches('\r');
        if content.trim().is_empty() || content.trim_start().starts_with('#') {
            continue;
        }
        let (word, value) = content.split_once('\t').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected word<TAB>value, got {content:?}"),
        })?;
        let value: f64 = value.trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("non-numeric value {:?}", value.trim()),
        })?;
        lex.insert(word, value)
            .map_err(|message| Error::Parse { line, message })?;
    }
    Ok(lex)
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<RewardLexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(&text)
}
