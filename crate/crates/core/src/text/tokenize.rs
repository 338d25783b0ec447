use serde::{Deserialize, Serialize};

use super::{TextError, Vocabulary, CONTINUATION_PREFIX};

/// Longer words are mapped to the unknown token without subword search.
const MAX_WORD_CHARS: usize = 100;

/// Encoded sequence. All four per-position lists have the same length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Byte range in the source text; `None` for special and padding tokens.
    pub surface_spans: Vec<Option<(usize, usize)>>,
    /// Tokens dropped by truncation.
    #[serde(default)]
    pub truncated: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn unpadded_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

pub(crate) struct Word {
    pub text: String,
    chars: Vec<char>,
    spans: Vec<(usize, usize)>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercase, split on whitespace, and split every punctuation character
/// into its own word. Each lowered char remembers its source byte range.
pub(crate) fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut cur: Option<Word> = None;
    let flush = |cur: &mut Option<Word>, words: &mut Vec<Word>| {
        if let Some(w) = cur.take() {
            words.push(w);
        }
    };
    for (start, c) in text.char_indices() {
        let end = start + c.len_utf8();
        if c.is_whitespace() || c.is_control() {
            flush(&mut cur, &mut words);
            continue;
        }
        if is_punct(c) {
            flush(&mut cur, &mut words);
            let lowered: Vec<char> = c.to_lowercase().collect();
            words.push(Word {
                text: lowered.iter().collect(),
                spans: vec![(start, end); lowered.len()],
                chars: lowered,
            });
            continue;
        }
        let w = cur.get_or_insert_with(|| Word {
            text: String::new(),
            chars: Vec::new(),
            spans: Vec::new(),
        });
        for lc in c.to_lowercase() {
            w.text.push(lc);
            w.chars.push(lc);
            w.spans.push((start, end));
        }
    }
    flush(&mut cur, &mut words);
    words
}

/// Lowercased words with punctuation characters split off.
pub fn words(text: &str) -> Vec<String> {
    pre_tokenize(text).into_iter().map(|w| w.text).collect()
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Greedy longest-prefix subword tokenization, no special tokens, no padding.
/// A word with no complete segmentation becomes a single unknown token.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence, TextError> {
    let words = pre_tokenize(text);
    if words.is_empty() {
        return Err(TextError::EmptyInput);
    }
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for word in &words {
        let n = word.chars.len();
        let whole = (word.spans[0].0, word.spans[n - 1].1);
        if n > MAX_WORD_CHARS {
            ids.push(vocab.unk());
            spans.push(Some(whole));
            continue;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut failed = false;
        while start < n {
            let mut found = None;
            for end in (start + 1..=n).rev() {
                let mut piece: String = word.chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION_PREFIX);
                }
                if let Some(id) = vocab.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push((id, (word.spans[start].0, word.spans[end - 1].1)));
                    start = end;
                }
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            ids.push(vocab.unk());
            spans.push(Some(whole));
        } else {
            for (id, span) in pieces {
                ids.push(id);
                spans.push(Some(span));
            }
        }
    }
    let n = ids.len();
    Ok(TokenSequence {
        ids,
        segment_ids: vec![0; n],
        attention_mask: vec![1; n],
        surface_spans: spans,
        truncated: 0,
    })
}

/// Rebuild lowercase text from the spans of a sequence: pieces whose spans
/// touch are glued, all others are separated by one space.
pub fn surface_text(source: &str, seq: &TokenSequence) -> String {
    let mut out = String::new();
    let mut last_end: Option<usize> = None;
    for &(start, end) in seq.surface_spans.iter().flatten() {
        match last_end {
            // a lowercase expansion split across pieces
            Some(e) if start < e => continue,
            Some(e) if start == e => {}
            Some(_) => out.push(' '),
            None => {}
        }
        out.push_str(&source[start..end].to_lowercase());
        last_end = Some(end);
    }
    out
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, padded to `max_len`.
///
/// When the parts do not fit, tokens are removed one at a time from the end
/// of whichever part is currently longer (`b` on ties).
pub fn encode_pair(
    a: &str,
    b: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TextError> {
    let specials = if b.is_some() { 3 } else { 2 };
    if max_len < 3 {
        return Err(TextError::Vocabulary(format!(
            "max_len {max_len} leaves no room for special tokens"
        )));
    }
    let mut ta = tokenize(a, vocab)?;
    let mut tb = match b {
        Some(b) => Some(tokenize(b, vocab)?),
        None => None,
    };
    let budget = max_len.saturating_sub(specials);
    let mut truncated = 0;
    loop {
        let lb = tb.as_ref().map_or(0, |t| t.ids.len());
        if ta.ids.len() + lb <= budget {
            break;
        }
        let target = match tb.as_mut() {
            Some(t) if t.ids.len() >= ta.ids.len() => t,
            _ => &mut ta,
        };
        target.ids.pop();
        target.surface_spans.pop();
        truncated += 1;
    }

    let mut seq = TokenSequence {
        ids: Vec::with_capacity(max_len),
        segment_ids: Vec::with_capacity(max_len),
        attention_mask: Vec::with_capacity(max_len),
        surface_spans: Vec::with_capacity(max_len),
        truncated,
    };
    let push = |seq: &mut TokenSequence, id: usize, segment: u8, span: Option<(usize, usize)>| {
        seq.ids.push(id);
        seq.segment_ids.push(segment);
        seq.attention_mask.push(1);
        seq.surface_spans.push(span);
    };
    push(&mut seq, vocab.cls(), 0, None);
    for (&id, &span) in ta.ids.iter().zip(&ta.surface_spans) {
        push(&mut seq, id, 0, span);
    }
    push(&mut seq, vocab.sep(), 0, None);
    if let Some(tb) = &tb {
        for (&id, &span) in tb.ids.iter().zip(&tb.surface_spans) {
            push(&mut seq, id, 1, span);
        }
        push(&mut seq, vocab.sep(), 1, None);
    }
    while seq.ids.len() < max_len {
        seq.ids.push(vocab.pad());
        seq.segment_ids.push(0);
        seq.attention_mask.push(0);
        seq.surface_spans.push(None);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
            .map(String::from)
            .to_vec();
        toks.extend(words.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(toks).unwrap()
    }

    fn names(v: &Vocabulary, s: &TokenSequence) -> Vec<String> {
        s.ids
            .iter()
            .map(|&i| v.token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn lowercases() {
        let v = vocab(&["dog"]);
        let s = tokenize("Dog", &v).unwrap();
        assert_eq!(names(&v, &s), ["dog"]);
        assert_eq!(s.surface_spans, vec![Some((0, 3))]);
    }

    #[test]
    fn greedy_longest_prefix() {
        let v = vocab(&["dog", "##s", "do", "##g"]);
        let s = tokenize("dogs", &v).unwrap();
        assert_eq!(names(&v, &s), ["dog", "##s"]);
    }

    #[test]
    fn unknown_word() {
        let v = vocab(&["dog"]);
        let s = tokenize("dog zebra", &v).unwrap();
        assert_eq!(names(&v, &s), ["dog", "[UNK]"]);
        assert_eq!(s.surface_spans[1], Some((4, 9)));
    }

    #[test]
    fn empty_text_is_error() {
        let v = vocab(&[]);
        assert!(matches!(tokenize("  \t ", &v), Err(TextError::EmptyInput)));
    }

    #[test]
    fn single_part_layout() {
        let v = vocab(&["x"]);
        let s = encode_pair("x", None, &v, 6).unwrap();
        assert_eq!(
            names(&v, &s),
            ["[CLS]", "x", "[SEP]", "[PAD]", "[PAD]", "[PAD]"]
        );
        assert_eq!(s.segment_ids, vec![0; 6]);
        assert_eq!(s.attention_mask, vec![1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn pair_layout() {
        let v = vocab(&["x", "y"]);
        let s = encode_pair("x", Some("y"), &v, 5).unwrap();
        assert_eq!(names(&v, &s), ["[CLS]", "x", "[SEP]", "y", "[SEP]"]);
        assert_eq!(s.segment_ids, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn truncation_longest_first() {
        let v = vocab(&["a", "b"]);
        let s = encode_pair("a a a a a a", Some("b b"), &v, 7).unwrap();
        assert_eq!(
            names(&v, &s),
            ["[CLS]", "a", "a", "[SEP]", "b", "b", "[SEP]"]
        );
        assert_eq!(s.truncated, 4);
    }

    #[test]
    fn max_len_too_small() {
        let v = vocab(&["a"]);
        assert!(encode_pair("a", None, &v, 2).is_err());
    }

    const WORDS: [&str; 6] = ["dog", "cat", "##s", "run", "##ning", "."];

    fn word_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("dog".to_string()),
            Just("Dogs".to_string()),
            Just("cat.".to_string()),
            Just("running".to_string()),
            Just("RUN".to_string()),
            Just("xyz".to_string()),
            Just("cats".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn surface_round_trip(words in proptest::collection::vec(word_strategy(), 1..8), seps in proptest::collection::vec(prop_oneof![Just(" "), Just("  "), Just("\t")], 8)) {
            let v = vocab(&WORDS);
            let mut text = String::new();
            for (i, w) in words.iter().enumerate() {
                if i > 0 { text.push_str(seps[i]); }
                text.push_str(w);
            }
            let s = tokenize(&text, &v).unwrap();
            prop_assert_eq!(surface_text(&text, &s), normalize(&text));
        }

        #[test]
        fn word_prefix_gives_token_prefix(words in proptest::collection::vec(word_strategy(), 2..8), cut in 1usize..7) {
            let v = vocab(&WORDS);
            let cut = cut.min(words.len() - 1);
            let full = words.join(" ");
            let prefix = words[..cut].join(" ");
            let a = tokenize(&full, &v).unwrap();
            let b = tokenize(&prefix, &v).unwrap();
            prop_assert_eq!(&a.ids[..b.ids.len()], &b.ids[..]);
        }

        #[test]
        fn encode_pair_fills_max_len(na in 1usize..30, nb in 1usize..30, max_len in 5usize..24) {
            let v = vocab(&["a", "b"]);
            let a = vec!["a"; na].join(" ");
            let b = vec!["b"; nb].join(" ");
            let s = encode_pair(&a, Some(&b), &v, max_len).unwrap();
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert_eq!(s.segment_ids.len(), max_len);
            prop_assert_eq!(s.attention_mask.len(), max_len);
            prop_assert_eq!(s.surface_spans.len(), max_len);
            let a_id = v.id("a").unwrap();
            let b_id = v.id("b").unwrap();
            prop_assert!(s.ids.contains(&a_id));
            prop_assert!(s.ids.contains(&b_id));
            for (i, &m) in s.attention_mask.iter().enumerate() {
                prop_assert_eq!(m == 0, s.ids[i] == v.pad());
            }
            let kept = s.ids.iter().filter(|&&i| i == a_id || i == b_id).count();
            prop_assert_eq!(kept + s.truncated, na + nb);
            if na + nb + 3 >= max_len {
                prop_assert_eq!(s.unpadded_len(), max_len);
            }
        }
    }
}
