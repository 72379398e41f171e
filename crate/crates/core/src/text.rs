//! Word-level normalization and vocabulary handling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

pub const DEFAULT_MAX_SEQ_LEN: usize = 30;

/// Marks split off as standalone tokens.
const DETACHED: &[char] = &['.', ',', '!', '?', '"', '(', ')'];

/// Marks that attach to the preceding token when detokenizing.
const TRAILING: &[&str] = &[".", ",", "!", "?"];

/// Lowercase, split on whitespace, and detach punctuation.
///
/// Apostrophes stay inside words so contractions remain single tokens.
pub fn normalize_tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for word in lowered.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if DETACHED.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Join tokens with single spaces, gluing `. , ! ?` onto the previous token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if !out.is_empty() && !TRAILING.contains(&tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Encoder input: tokens followed by EOS.
    Source,
    /// Decoder target: SOS, tokens, EOS.
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Build from an id-ordered token list whose first four entries are the
    /// special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with <pad> <sos> <eos> <unk>".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab {
            id_to_token: tokens,
            token_to_id,
        })
    }

    /// Every token of the corpus seen at least `min_count` times, ordered by
    /// descending frequency then lexicographically.
    pub fn build(corpus: &Corpus, min_count: usize) -> Result<Self> {
        if corpus.pairs.is_empty() {
            return Err(Error::Argument("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for pair in &corpus.pairs {
            for text in [&pair.question, &pair.answer] {
                for tok in normalize_tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(tok, _)| tok))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Map tokens to ids, truncating to `max_len` tokens before framing.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], role: Role, max_len: usize) -> Vec<u32> {
        let body = tokens
            .iter()
            .take(max_len)
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK));
        match role {
            Role::Source => body.chain(std::iter::once(EOS)).collect(),
            Role::Target => std::iter::once(SOS)
                .chain(body)
                .chain(std::iter::once(EOS))
                .collect(),
        }
    }

    pub fn encode_text(&self, text: &str, role: Role, max_len: usize) -> Vec<u32> {
        self.encode(&normalize_tokenize(text), role, max_len)
    }

    /// Tokens for `ids` with PAD, SOS and EOS dropped.
    pub fn decode_tokens(&self, ids: &[u32]) -> Result<Vec<&str>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Argument(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            if !matches!(id, PAD | SOS | EOS) {
                out.push(tok);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(detokenize(&self.decode_tokens(ids)?))
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.id_to_token
    }
}
