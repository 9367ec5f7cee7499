use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const TAGGED: u32 = 5;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[Tagged]"];

pub fn is_reserved(id: u32) -> bool {
    (id as usize) < RESERVED.len()
}

/// Word-level vocabulary; ids `0..6` are always the reserved tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl From<Vec<String>> for Vocab {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.id_to_token
    }
}

/// Splits lowercased text into word and punctuation tokens. Bracketed
/// reserved names such as `[SEP]` stay whole.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(name) = RESERVED
                .iter()
                .find(|r| rest.get(..r.len()).is_some_and(|head| head.eq_ignore_ascii_case(r)))
            {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(name.to_string());
                rest = &rest[name.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() || c == '\'' {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    /// Frequency-ranked vocabulary (ties broken lexicographically), capped at
    /// `max_size` ids including the reserved ones.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
        if max_size <= RESERVED.len() {
            return Err(Error::Contract(format!(
                "vocabulary size {max_size} leaves no room beyond the {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for tok in split_words(line.as_ref()) {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocab::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
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

    /// Token ids of `text` without `[CLS]`; unknown words map to `[UNK]`.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// `[CLS]` followed by the words of `text`, at most `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len.min(64));
        ids.push(CLS);
        ids.extend(self.encode_words(text));
        ids.truncate(max_len.max(1));
        ids
    }

    /// `[CLS] a [SEP] b [SEP]`, truncated to `max_len` ids.
    pub fn tokenize_pair(&self, a: &str, b: Option<&str>, max_len: usize) -> Vec<u32> {
        let Some(b) = b else {
            return self.tokenize(a, max_len);
        };
        let mut ids = vec![CLS];
        ids.extend(self.encode_words(a));
        ids.push(SEP);
        ids.extend(self.encode_words(b));
        ids.push(SEP);
        ids.truncate(max_len.max(1));
        ids
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// First 8 bytes of SHA-256 over the newline-joined token list, as hex.
    pub fn digest(&self) -> String {
        let joined = self.id_to_token.join("\n");
        sha256_hex(joined.as_bytes())[..16].to_string()
    }
}
