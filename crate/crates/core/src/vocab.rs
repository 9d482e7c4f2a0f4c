//! Word-level vocabulary shared by the proposal encoder and the language model.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const VIDEO: &str = "<video>";
pub const IMAGE: &str = "<image>";
pub const MASK: &str = "<|mask|>";

/// Number of timestamp tokens `<|t00|>..<|t60|>`.
pub const NUM_TIMESTAMP_TOKENS: usize = 61;

pub fn timestamp_token(index: usize) -> String {
    format!("<|t{index:02}|>")
}

const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '"', '(', ')'];

/// Lowercases and splits text into word and punctuation pieces.
///
/// Angle-bracket specials such as `<video>` or `<|t09|>` survive as single pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut rest = raw;
        while !rest.is_empty() {
            if rest.starts_with('<') {
                if let Some(end) = rest.find('>') {
                    out.push(rest[..=end].to_string());
                    rest = &rest[end + 1..];
                    continue;
                }
            }
            let c = rest.chars().next().expect("nonempty");
            if PUNCT.contains(&c) {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(_, ch)| PUNCT.contains(&ch) || ch == '<')
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
        }
    }
    out
}

/// Joins word pieces back into text, attaching punctuation to the left.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut s = String::new();
    for w in words {
        let w = w.as_ref();
        let attach = matches!(w, "." | "," | ";" | ":" | "!" | "?" | ")");
        if !s.is_empty() && !attach {
            s.push(' ');
        }
        s.push_str(w);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first, then the sorted words of `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS, VIDEO, IMAGE, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..NUM_TIMESTAMP_TOKENS).map(timestamp_token));
        let specials: BTreeSet<String> = tokens.iter().cloned().collect();
        let words: BTreeSet<String> = corpus
            .into_iter()
            .flat_map(split_words)
            .filter(|w| !specials.contains(w))
            .collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or_else(|| self.unk())
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn pad(&self) -> u32 {
        self.index[PAD]
    }
    pub fn unk(&self) -> u32 {
        self.index[UNK]
    }
    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }
    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }
    pub fn mask(&self) -> u32 {
        self.index[MASK]
    }

    pub fn timestamp(&self, index: usize) -> u32 {
        self.index[&timestamp_token(index.min(NUM_TIMESTAMP_TOKENS - 1))]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Decodes ids, dropping padding and control tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i))
            .filter(|t| !matches!(*t, PAD | BOS | EOS))
            .collect();
        join_words(&words)
    }
}
