//! Word-level vocabulary for the rewriter policy.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabError {
    MissingSpecial(&'static str),
    Duplicate(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::MissingSpecial(t) => write!(f, "vocabulary lacks special token {t}"),
            VocabError::Duplicate(t) => write!(f, "duplicate vocabulary entry {t:?}"),
        }
    }
}

impl core::error::Error for VocabError {}

/// Dense token table. Ids 0, 1, 2 are BOS, EOS and UNK when built with
/// [`Vocab::build`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

/// Lowercased whitespace words with surrounding punctuation trimmed.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl Vocab {
    /// Vocabulary over every word of `texts`, in first-seen order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut tokens: Vec<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeMap<String, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        for text in texts {
            for w in words(text) {
                if !seen.contains_key(&w) {
                    seen.insert(w.clone(), tokens.len() as TokenId);
                    tokens.push(w);
                }
            }
        }
        Self::from_tokens(tokens).expect("specials present and entries unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        let get = |name: &'static str| ids.get(name).copied().ok_or(VocabError::MissingSpecial(name));
        let (bos, eos, unk) = (get(BOS)?, get(EOS)?, get(UNK)?);
        Ok(Self { tokens, ids, bos, eos, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Word ids of `text`, unknown words mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        words(text).iter().map(|w| self.id(w).unwrap_or(self.unk)).collect()
    }

    /// Like [`encode`](Self::encode) with EOS appended.
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(self.eos);
        ids
    }

    /// Space-joined words, stopping at EOS and skipping BOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos {
                break;
            }
            if id == self.bos {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK));
        }
        out
    }
}
