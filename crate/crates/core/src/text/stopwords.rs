use std::collections::HashSet;
use std::path::Path;

use super::TextError;

const ENGLISH: &str = include_str!("../../data/stopwords_en.txt");

/// Lowercase stopword set, loaded from a one-word-per-line file.
#[derive(Debug, Clone, PartialEq)]
pub struct StopwordList {
    words: HashSet<String>,
    source: String,
}

impl StopwordList {
    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self, TextError> {
        let source = source.into();
        let words: HashSet<String> = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        if words.is_empty() {
            return Err(TextError::EmptyStopwords(source));
        }
        Ok(Self { words, source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.display().to_string())
    }

    /// The bundled English list (`data/stopwords_en.txt`).
    pub fn english() -> Self {
        Self::parse(ENGLISH, "data/stopwords_en.txt").expect("bundled list is non-empty")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn english_list_is_case_insensitive() {
        let s = StopwordList::english();
        assert_eq!(s.len(), 179);
        assert!(s.contains("The"));
        assert!(s.contains("of"));
        assert!(!s.contains("school"));
    }

    #[test]
    fn empty_list_rejected() {
        assert!(StopwordList::parse("\n  \n", "x").is_err());
    }
}
