//! BERT-style tokenization: whitespace/punctuation pre-split followed by
//! greedy longest-match WordPiece.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
    unk: u32,
    cls: u32,
    sep: u32,
}

impl Tokenizer {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::Environment(
                "vocabulary contains duplicate tokens".into(),
            ));
        }
        let special = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Environment(format!("vocabulary lacks {s}")))
        };
        Ok(Self {
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            tokens,
            index,
            lowercase,
        })
    }

    /// Reads a `vocab.txt` with one token per line.
    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
            lowercase,
        )
    }

    /// Small lowercase vocabulary: specials, single characters with their
    /// `##` continuations, and a bundled geography word list. Any ASCII
    /// word is representable.
    pub fn tiny() -> Self {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let chars: Vec<char> = ('a'..='z')
            .chain('0'..='9')
            .chain("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~".chars())
            .collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(
            chars
                .iter()
                .filter(|c| c.is_alphanumeric())
                .map(|c| format!("##{c}")),
        );
        for w in include_str!("../../assets/tiny_vocab_words.txt").lines() {
            let w = w.trim();
            if !w.is_empty() && !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens, true).expect("tiny vocabulary is well formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn pre_split(&self, text: &str) -> Vec<String> {
        // Uncased vocabularies are built from accent-stripped text.
        let folded: String;
        let text = if self.lowercase {
            folded = text.nfd().filter(|c| !is_combining_mark(*c)).collect();
            folded.as_str()
        } else {
            text
        };
        let mut words = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            if c.is_control() && !c.is_whitespace() {
                continue;
            }
            if c.is_whitespace() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else if !c.is_alphanumeric() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else if self.lowercase {
                cur.extend(c.to_lowercase());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut sub: String = chars[start..end].iter().collect();
                if start > 0 {
                    sub.insert_str(0, "##");
                }
                if let Some(&id) = self.index.get(&sub) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Word pieces of `text` without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in self.pre_split(text) {
            self.word_pieces(&w, &mut ids);
        }
        ids
    }

    /// `[CLS] pieces [SEP]`, truncated to `max_len` tokens in total.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len.min(512));
        ids.push(self.cls);
        let body = self.tokenize(text);
        let room = max_len.saturating_sub(2);
        ids.extend(body.into_iter().take(room));
        ids.push(self.sep);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_vocab_covers_words_and_pieces() {
        let t = Tokenizer::tiny();
        let ids = t.tokenize("The River Delta, near Sindh!");
        let toks: Vec<&str> = ids.iter().map(|&i| t.token(i).unwrap()).collect();
        assert_eq!(
            toks,
            vec!["the", "river", "delta", ",", "near", "s", "##i", "##n", "##d", "##h", "!"]
        );
        assert_eq!(t.tokenize("Zürich"), t.tokenize("zurich"));
        assert_eq!(t.tokenize("\u{1F30A}"), vec![t.id(UNK).unwrap()]);
    }

    #[test]
    fn encode_adds_specials_and_truncates() {
        let t = Tokenizer::tiny();
        let ids = t.encode("missing", 64);
        assert_eq!(ids.first(), Some(&t.cls_id()));
        assert_eq!(ids.last(), Some(&t.sep_id()));
        let long = "river ".repeat(5000);
        assert_eq!(t.encode(&long, 64).len(), 64);
        assert_eq!(t.encode("", 64).len(), 2);
    }

    #[test]
    fn cased_mode_keeps_case() {
        let t = Tokenizer::from_tokens(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "Boston", "boston"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            false,
        )
        .unwrap();
        assert_eq!(t.tokenize("Boston boston"), vec![4, 5]);
        assert!(Tokenizer::from_tokens(vec!["[UNK]".into()], true).is_err());
    }
}
