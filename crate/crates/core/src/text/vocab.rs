use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::TextError;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
/// Marks a subword that continues the previous piece of the same word.
pub const CONTINUATION_PREFIX: &str = "##";

/// Token ↔ id map with dense ids. The file form is one token per line, the
/// line number being the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    cls: usize,
    sep: usize,
    pad: usize,
    unk: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(TextError::Vocabulary(format!(
                    "duplicate token `{tok}` at line {}",
                    id + 1
                )));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| TextError::Vocabulary(format!("missing special token {name}")))
        };
        Ok(Self {
            cls: special(CLS)?,
            sep: special(SEP)?,
            pad: special(PAD)?,
            unk: special(UNK)?,
            tokens,
            index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        crate::util::write_atomic(path.as_ref(), out.as_bytes())
    }

    /// Whole-word vocabulary for toy setups: the four special tokens, then
    /// every distinct lowercase word (and punctuation mark) in sorted order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for word in super::tokenize::pre_tokenize(text) {
                words.insert(word.text);
            }
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| ![PAD, UNK, CLS, SEP].contains(&w.as_str())),
        );
        Self::from_tokens(tokens).expect("specials are present and words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn cls(&self) -> usize {
        self.cls
    }

    pub fn sep(&self) -> usize {
        self.sep
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.cls || id == self.sep || id == self.pad || id == self.unk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_required() {
        let err = Vocabulary::from_tokens(vec!["[PAD]".into(), "dog".into()]).unwrap_err();
        assert!(err.to_string().contains("missing special"));
    }

    #[test]
    fn duplicates_rejected() {
        let toks = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "a"]
            .map(String::from)
            .to_vec();
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::from_corpus(["The dog, the cat."]);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("dog"), v.id("dog"));
        assert!(back.id(",").is_some());
    }
}
