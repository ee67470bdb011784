//! Vocabularies, embedding tables, the non-sensitive token set and Euclidean
//! token distances.

mod distance;
mod embeddings;
mod nonsensitive;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CapeError, Result};

pub use distance::{distance_row, DistanceCache, DistanceRow};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use nonsensitive::{load_nonsensitive, NonSensitiveLoad, NonSensitiveSet, DEFAULT_NONSENSITIVE};

/// Index of a token in a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(index: usize) -> Self {
        TokenId(u32::try_from(index).expect("token index exceeds u32"))
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Ordered token strings with a bijective string-to-id map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(CapeError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), TokenId::from_index(i)).is_some() {
                return Err(CapeError::DuplicateToken { token: token.clone(), line: i + 1 });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reads one token per line; ids follow line order. A trailing newline is
    /// not a token, but interior blank lines are (and so can only appear once).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CapeError::io(path, e))?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        if body.is_empty() {
            return Err(CapeError::EmptyVocabulary);
        }
        Self::from_tokens(body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if id.index() < self.len() {
            Ok(())
        } else {
            Err(CapeError::TokenOutOfRange { id: id.index(), size: self.len() })
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> {
        (0..self.len()).map(TokenId::from_index)
    }

    /// Lowercase hex SHA-256 of the tokens, each followed by `\n` (the
    /// canonical vocabulary file). Providers report the same checksum so a
    /// logit vector can be bound to a vocabulary before it is used.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| self.token(id).ok_or(CapeError::TokenOutOfRange { id: id.index(), size: self.len() }))
            .collect()
    }
}
