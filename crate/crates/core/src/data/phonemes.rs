use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpqError};

/// A language's phoneme inventory. The order of `phonemes` is the row order
/// of every per-language matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPhonemeSet")]
pub struct LanguagePhonemeSet {
    pub language: String,
    pub phonemes: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhonemeSet {
    language: String,
    phonemes: Vec<String>,
}

impl TryFrom<RawPhonemeSet> for LanguagePhonemeSet {
    type Error = XpqError;

    fn try_from(raw: RawPhonemeSet) -> Result<Self> {
        Self::new(raw.language, raw.phonemes)
    }
}

impl LanguagePhonemeSet {
    pub fn new(language: impl Into<String>, phonemes: Vec<String>) -> Result<Self> {
        let mut set = Self {
            language: language.into(),
            phonemes,
            index: HashMap::new(),
        };
        set.reindex()?;
        Ok(set)
    }

    fn reindex(&mut self) -> Result<()> {
        if self.language.is_empty() {
            return Err(XpqError::Validation("empty language id".into()));
        }
        if self.phonemes.is_empty() {
            return Err(XpqError::Validation(format!(
                "language `{}` has an empty phoneme set",
                self.language
            )));
        }
        self.index.clear();
        for (i, p) in self.phonemes.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(XpqError::Validation(format!(
                    "invalid phoneme symbol {p:?} in `{}`",
                    self.language
                )));
            }
            if self.index.insert(p.clone(), i).is_some() {
                return Err(XpqError::Validation(format!(
                    "duplicate phoneme `{p}` in `{}`",
                    self.language
                )));
            }
        }
        Ok(())
    }

    /// Number of phonemes `m`.
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.phonemes[index]
    }

    /// `language-symbol`, unique across languages.
    pub fn namespaced(&self, index: usize) -> String {
        namespaced(&self.language, &self.phonemes[index])
    }
}

pub fn namespaced(language: &str, symbol: &str) -> String {
    format!("{language}-{symbol}")
}

/// One symbol per line; order is significant. Blank lines are skipped.
pub fn load_phoneme_set(language: &str, path: impl AsRef<Path>) -> Result<LanguagePhonemeSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| XpqError::io(path, e))?;
    let phonemes = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    LanguagePhonemeSet::new(language, phonemes)
}

pub fn save_phoneme_set(set: &LanguagePhonemeSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = set.phonemes.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| XpqError::io(path, e))
}
