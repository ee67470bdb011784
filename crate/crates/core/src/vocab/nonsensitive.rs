use std::collections::BTreeSet;
use std::path::Path;

use super::{TokenId, Vocabulary};
use crate::error::{CapeError, Result};

/// Shipped list: 179 English stopwords followed by the 32 ASCII punctuation
/// characters, one per line.
pub const DEFAULT_NONSENSITIVE: &str = include_str!("../../data/nonsensitive_en.txt");

/// Token ids that are copied through perturbation unchanged.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NonSensitiveSet {
    ids: BTreeSet<TokenId>,
}

/// Result of resolving a token list against a vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NonSensitiveLoad {
    pub set: NonSensitiveSet,
    /// List entries with no vocabulary id; they are skipped.
    pub missing: Vec<String>,
}

impl NonSensitiveSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let ids: BTreeSet<TokenId> = ids.into_iter().collect();
        for &id in &ids {
            vocab.check(id)?;
        }
        Ok(NonSensitiveSet { ids })
    }

    pub fn resolve<'a>(tokens: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary) -> NonSensitiveLoad {
        let mut ids = BTreeSet::new();
        let mut missing = Vec::new();
        for token in tokens {
            match vocab.id(token) {
                Some(id) => {
                    ids.insert(id);
                }
                None => missing.push(token.to_string()),
            }
        }
        NonSensitiveLoad { set: NonSensitiveSet { ids }, missing }
    }

    /// The shipped stopword and punctuation list intersected with `vocab`.
    pub fn default_for(vocab: &Vocabulary) -> NonSensitiveLoad {
        Self::resolve(list_lines(DEFAULT_NONSENSITIVE), vocab)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.ids.iter().copied()
    }
}

fn list_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).filter(|l| !l.is_empty())
}

pub fn load_nonsensitive(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<NonSensitiveLoad> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CapeError::io(path, e))?;
    let load = NonSensitiveSet::resolve(list_lines(&text), vocab);
    if !load.missing.is_empty() {
        log::warn!("{}: {} non-sensitive tokens not in vocabulary (skipped)", path.display(), load.missing.len());
    }
    Ok(load)
}
