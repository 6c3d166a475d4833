use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::SentenceRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

/// Character vocabulary: one token per Unicode code point after the five
/// reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    chars: String,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_chars(r.chars.chars().collect())
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            chars: v.chars.iter().collect(),
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from characters in id order (ids start after the
    /// specials).
    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIALS))
            .collect();
        Vocab { chars, index }
    }

    /// Ids assigned by descending frequency, ties broken by ascending code
    /// point; characters seen fewer than `min_freq` times map to `<unk>`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut any = false;
        for t in texts {
            any = true;
            for c in t.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Vocab::from_chars(ranked.into_iter().map(|(c, _)| c).collect()))
    }

    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-special tokens.
    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn token(&self, id: usize) -> Option<String> {
        if id < NUM_SPECIALS {
            Some(SPECIAL_NAMES[id].to_string())
        } else {
            self.chars.get(id - NUM_SPECIALS).map(|c| c.to_string())
        }
    }

    /// Hex SHA-256 over the token list, stable across save/load.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in SPECIAL_NAMES {
            h.update(name.as_bytes());
            h.update(b"\n");
        }
        let mut buf = [0u8; 4];
        for c in &self.chars {
            h.update(c.encode_utf8(&mut buf).as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Vocabulary over record texts only.
pub fn build_vocab(records: &[SentenceRecord], min_freq: usize) -> Result<Vocab> {
    Vocab::build(records.iter().map(|r| r.text.as_str()), min_freq)
}
