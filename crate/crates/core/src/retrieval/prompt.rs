use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ContextCandidate, ContextSource};
use crate::text::{words, StopwordList};

/// Stripped from generated text before anything else.
pub const SPECIAL_TOKENS: [&str; 2] = ["</s>", "<pad>"];

const MAX_PHRASE_WORDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptTemplate {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    WhatIs,
    Describe,
}

impl PromptTemplate {
    pub const SINGLE: [PromptTemplate; 3] = [Self::P1, Self::P2, Self::P3];
    pub const PAIR: [PromptTemplate; 3] = [Self::P4, Self::P5, Self::P6];

    pub fn id(self) -> &'static str {
        match self {
            Self::P1 => "P1",
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P4 => "P4",
            Self::P5 => "P5",
            Self::P6 => "P6",
            Self::WhatIs => "what_is",
            Self::Describe => "describe",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Self::P4 | Self::P5 | Self::P6 => 2,
            _ => 1,
        }
    }

    /// `b` is required for two-slot templates and ignored otherwise.
    pub fn render(self, a: &str, b: Option<&str>) -> Option<String> {
        let b = || b.map(str::to_string);
        Some(match self {
            Self::P1 => format!("define {a}"),
            Self::P2 => format!("what is the definition of {a}"),
            Self::P3 => format!("explain {a}"),
            Self::P4 => format!("relation between {a} and {}", b()?),
            Self::P5 => format!("how is {a} related to {}", b()?),
            Self::P6 => format!("explain {a} in terms of {}", b()?),
            Self::WhatIs => format!("what is {a}"),
            Self::Describe => format!("describe {a}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Single-slot templates over the target and each phrase.
    Np,
    /// Two-slot templates over (phrase, target).
    NpTarg,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "np" => Ok(Self::Np),
            "np_targ" => Ok(Self::NpTarg),
            other => Err(format!("unknown prompt mode {other:?} (np, np-targ)")),
        }
    }
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_words: usize,
    pub m: usize,
    pub mode: PromptMode,
    /// Additional single-slot templates for NP mode.
    #[serde(default)]
    pub extra_templates: Vec<PromptTemplate>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_words: 40,
            m: 2,
            mode: PromptMode::Np,
            extra_templates: Vec::new(),
            max_in_flight: default_max_in_flight(),
        }
    }
}

/// Proposes candidate phrases in document order.
pub trait Chunker {
    fn chunk(&self, text: &str, stopwords: &StopwordList) -> Vec<String>;
}

/// Maximal runs of non-stopword, non-punctuation words, cut into
/// consecutive pieces of at most three words.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopwordChunker;

impl Chunker for StopwordChunker {
    fn chunk(&self, text: &str, stopwords: &StopwordList) -> Vec<String> {
        let mut out = Vec::new();
        let mut run: Vec<String> = Vec::new();
        let mut flush = |run: &mut Vec<String>| {
            for piece in run.chunks(MAX_PHRASE_WORDS) {
                out.push(piece.join(" "));
            }
            run.clear();
        };
        for w in words(text) {
            if w.chars().any(char::is_alphanumeric) && !stopwords.contains(&w) {
                run.push(w);
            } else {
                flush(&mut run);
            }
        }
        flush(&mut run);
        out
    }
}

pub fn extract_noun_phrases(
    text: &str,
    target: &str,
    stopwords: &StopwordList,
    chunker: &dyn Chunker,
) -> Vec<String> {
    let target = words(target).join(" ");
    let mut seen = HashSet::new();
    chunker
        .chunk(text, stopwords)
        .into_iter()
        .filter_map(|p| {
            let ws = words(&p);
            let norm = ws.join(" ");
            let keep = !ws.is_empty()
                && ws.len() <= MAX_PHRASE_WORDS
                && norm != target
                && !ws.iter().all(|w| stopwords.contains(w))
                && seen.insert(norm.clone());
            keep.then_some(norm)
        })
        .collect()
}

pub fn build_prompts(
    phrases: &[String],
    target: &str,
    config: &GenerationConfig,
) -> Vec<(PromptTemplate, String)> {
    let target = target.trim();
    let mut out = Vec::new();
    match config.mode {
        PromptMode::Np => {
            let templates: Vec<PromptTemplate> = PromptTemplate::SINGLE
                .into_iter()
                .chain(
                    config
                        .extra_templates
                        .iter()
                        .copied()
                        .filter(|t| t.arity() == 1),
                )
                .collect();
            for input in std::iter::once(target).chain(phrases.iter().map(String::as_str)) {
                for &t in &templates {
                    out.extend(t.render(input, None).map(|p| (t, p)));
                }
            }
        }
        PromptMode::NpTarg => {
            for phrase in phrases {
                for t in PromptTemplate::PAIR {
                    out.extend(t.render(phrase, Some(target)).map(|p| (t, p)));
                }
            }
        }
    }
    out
}

fn strip_special(text: &str) -> String {
    let mut s = text.to_string();
    for tok in SPECIAL_TOKENS {
        s = s.replace(tok, " ");
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Repetitions are occurrences beyond the first of each distinct word.
fn mostly_repetition(text: &str) -> bool {
    let ws: Vec<&str> = text.split_whitespace().collect();
    let distinct: HashSet<&str> = ws.iter().copied().collect();
    2 * (ws.len() - distinct.len()) > ws.len()
}

/// `raw` holds (prompt, generated text) pairs. Survivors are ranked by word
/// count, longest first, ties in lexicographic order, and cut to `m`.
pub fn postprocess_candidates(
    raw: &[(String, String)],
    config: &GenerationConfig,
) -> Vec<ContextCandidate> {
    let mut out: Vec<ContextCandidate> = raw
        .iter()
        .filter_map(|(prompt, text)| {
            let text = strip_special(text);
            (!text.is_empty() && !mostly_repetition(&text)).then(|| ContextCandidate {
                score: text.split_whitespace().count() as f64,
                text,
                source: ContextSource::Prompt,
                provenance: prompt.clone(),
            })
        })
        .collect();
    super::rank_candidates(&mut out);
    out.truncate(config.m);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sw() -> StopwordList {
        StopwordList::english()
    }

    #[test]
    fn phrases_from_example_text() {
        let p = extract_noun_phrases(
            "Creates a sense of school spirit.",
            "school uniforms",
            &sw(),
            &StopwordChunker,
        );
        assert!(p.contains(&"school spirit".to_string()));
        let p = extract_noun_phrases(
            "School uniforms create school spirit",
            "school uniforms",
            &sw(),
            &StopwordChunker,
        );
        assert!(!p.contains(&"school uniforms".to_string()));
        assert!(extract_noun_phrases("it is what it was", "x", &sw(), &StopwordChunker).is_empty());
    }

    #[test]
    fn long_runs_are_split() {
        let p = extract_noun_phrases(
            "mandatory school uniform policy debates",
            "x",
            &sw(),
            &StopwordChunker,
        );
        assert_eq!(p, ["mandatory school uniform", "policy debates"]);
        assert!(p.iter().all(|x| x.split(' ').count() <= 3));
    }

    struct Fixed(Vec<&'static str>);
    impl Chunker for Fixed {
        fn chunk(&self, _: &str, _: &StopwordList) -> Vec<String> {
            self.0.iter().map(|s| s.to_string()).collect()
        }
    }

    #[test]
    fn filters_apply_to_any_chunker() {
        let c = Fixed(vec![
            "the very long four",
            "of the",
            "Gun Control",
            "gun control",
            "guns",
            "safety",
        ]);
        assert_eq!(
            extract_noun_phrases("", "guns", &sw(), &c),
            ["gun control", "safety"]
        );
    }

    #[test]
    fn template_rendering() {
        let cfg = GenerationConfig::default();
        let prompts = build_prompts(&["school spirit".into()], "school uniforms", &cfg);
        assert_eq!(
            prompts[0],
            (PromptTemplate::P1, "define school uniforms".to_string())
        );
        assert_eq!(prompts.len(), 6);
        assert_eq!(prompts[4].1, "what is the definition of school spirit");

        let cfg = GenerationConfig {
            mode: PromptMode::NpTarg,
            ..Default::default()
        };
        let prompts = build_prompts(&["school spirit".into()], "school uniforms", &cfg);
        let texts: Vec<_> = prompts.iter().map(|p| p.1.as_str()).collect();
        assert_eq!(
            texts,
            [
                "relation between school spirit and school uniforms",
                "how is school spirit related to school uniforms",
                "explain school spirit in terms of school uniforms",
            ]
        );
        assert!(build_prompts(&[], "t", &cfg).is_empty());

        let extras = GenerationConfig {
            extra_templates: vec![PromptTemplate::WhatIs, PromptTemplate::Describe],
            ..Default::default()
        };
        let prompts = build_prompts(&[], "guns", &extras);
        assert_eq!(prompts.last().unwrap().1, "describe guns");
        assert!(prompts.iter().all(|p| !p.1.ends_with(['.', '?', '!'])));
    }

    fn raw(texts: &[&str]) -> Vec<(String, String)> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t.to_string()))
            .collect()
    }

    fn texts(c: &[ContextCandidate]) -> Vec<&str> {
        c.iter().map(|c| c.text.as_str()).collect()
    }

    #[test]
    fn postprocess_rules() {
        let cfg = GenerationConfig::default();
        assert!(postprocess_candidates(&raw(&["the the the the dog"]), &cfg).is_empty());
        assert_eq!(
            texts(&postprocess_candidates(&raw(&["a</s><pad>"]), &cfg)),
            ["a"]
        );
        let got = postprocess_candidates(&raw(&["one two three", "one two", "x x x x"]), &cfg);
        assert_eq!(texts(&got), ["one two three", "one two"]);
        assert_eq!(got[0].provenance, "p0");
        // exactly half repeated is kept
        assert_eq!(
            texts(&postprocess_candidates(&raw(&["a a b b"]), &cfg)),
            ["a a b b"]
        );
        assert!(postprocess_candidates(&[], &cfg).is_empty());
    }

    proptest! {
        #[test]
        fn postprocess_invariants(gens in prop::collection::vec("(a|b|c|dd|</s>|<pad>| ){0,12}", 0..8), m in 1usize..4) {
            let cfg = GenerationConfig { m, ..Default::default() };
            let out = postprocess_candidates(&raw(&gens.iter().map(String::as_str).collect::<Vec<_>>()), &cfg);
            prop_assert!(out.len() <= m);
            for c in &out {
                prop_assert!(!c.text.contains("</s>") && !c.text.contains("<pad>"));
            }
            for w in out.windows(2) {
                prop_assert!(w[0].text.split_whitespace().count() >= w[1].text.split_whitespace().count());
            }
            let again_raw: Vec<(String, String)> = out.iter().map(|c| (c.provenance.clone(), c.text.clone())).collect();
            prop_assert_eq!(postprocess_candidates(&again_raw, &cfg), out);
        }
    }
}
