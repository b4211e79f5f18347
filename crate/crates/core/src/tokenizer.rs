//! Word-level vocabulary and text/id conversion.
//!
//! Ids 0..=4 are always `[PAD] [MASK] [UNK] [CLS] [SEP]`. Content tokens are
//! lowercased whitespace-delimited words ordered by descending corpus
//! frequency, ties broken lexicographically.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const CLS_ID: usize = 3;
pub const SEP_ID: usize = 4;

pub const SPECIALS: [&str; 5] = [PAD, MASK, UNK, CLS, SEP];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!(
                    "vocab line {i} must be {s}, found {:?}",
                    tokens.get(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("vocab token {i} is empty or has whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
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

    pub fn is_special_id(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Serialized form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

/// Token ids with flags marking special-token positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub is_special: Vec<bool>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    /// Content tokens only (no special flags set).
    pub fn from_content(ids: Vec<usize>) -> Self {
        let is_special = vec![false; ids.len()];
        TokenSequence { ids, is_special }
    }

    pub fn push(&mut self, id: usize, special: bool) {
        self.ids.push(id);
        self.is_special.push(special);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions not flagged special.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special[i]).collect()
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in words(text.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Lowercase, split on whitespace, map out-of-vocabulary words to `[UNK]`.
/// Never adds framing tokens.
pub fn encode(text: &str, vocab: &Vocab) -> TokenSequence {
    let ids = words(text)
        .map(|w| match vocab.id(&w) {
            Some(id) if !Vocab::is_special_id(id) => id,
            _ => UNK_ID,
        })
        .collect();
    TokenSequence::from_content(ids)
}

pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> Result<String> {
    let mut parts = Vec::with_capacity(seq.len());
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or_else(|| {
            Error::invalid(format!("token id {id} out of range for vocab of {}", vocab.len()))
        })?;
        parts.push(tok);
    }
    Ok(parts.join(" "))
}
