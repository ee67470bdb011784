//! Sources of contextual logits, tokenization and embeddings.
//!
//! A provider is bound to one [`Vocabulary`] through its checksum, and every
//! logit vector it returns is checked against the vocabulary size.

mod file;
mod http;
mod record;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CapeError, Result};
use crate::utility::LogitVector;
use crate::vocab::{EmbeddingTable, TokenId, Vocabulary};

pub use file::{FileProvider, FixtureWriter, ManifestEntry, ProviderMeta};
pub use http::{HttpConfig, HttpProvider, ServerInfo};
pub use record::RecordingProvider;

/// How much of the prompt the model sees when scoring a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The whole prompt with the target replaced by a mask.
    #[default]
    Bidirectional,
    /// Only tokens before the target.
    Causal,
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextMode::Bidirectional => "bidirectional",
            ContextMode::Causal => "causal",
        })
    }
}

impl std::str::FromStr for ContextMode {
    type Err = CapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(ContextMode::Bidirectional),
            "causal" => Ok(ContextMode::Causal),
            other => Err(CapeError::InvalidParameter(format!("mode must be bidirectional or causal, got {other:?}"))),
        }
    }
}

/// A prompt and the position whose replacement is being scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow<'a> {
    pub token_ids: &'a [TokenId],
    pub target_position: usize,
    pub mode: ContextMode,
}

impl<'a> ContextWindow<'a> {
    pub fn new(token_ids: &'a [TokenId], target_position: usize, mode: ContextMode) -> Result<Self> {
        if target_position >= token_ids.len() {
            return Err(CapeError::InvalidParameter(format!(
                "target position {target_position} outside prompt of length {}",
                token_ids.len()
            )));
        }
        Ok(Self { token_ids, target_position, mode })
    }

    /// The tokens the model conditions on, `None` standing for the mask.
    /// Causal windows at position 0 are empty.
    pub fn visible_tokens(&self) -> Vec<Option<TokenId>> {
        match self.mode {
            ContextMode::Bidirectional => {
                self.token_ids.iter().enumerate().map(|(i, &t)| (i != self.target_position).then_some(t)).collect()
            }
            ContextMode::Causal => self.token_ids[..self.target_position].iter().map(|&t| Some(t)).collect(),
        }
    }

    pub fn target(&self) -> TokenId {
        self.token_ids[self.target_position]
    }

    pub fn prompt_key(&self) -> String {
        prompt_key(self.token_ids)
    }

    pub fn context_id(&self) -> String {
        format!("{}:{}", self.prompt_key(), self.target_position)
    }
}

/// Lowercase hex SHA-256 of the token ids as little-endian `u32`s.
pub fn prompt_key(token_ids: &[TokenId]) -> String {
    let mut hasher = Sha256::new();
    for id in token_ids {
        hasher.update(id.0.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    File,
    Http,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub kind: ProviderKind,
    pub vocabulary_hash: String,
    pub vocab_size: usize,
    pub model_name: String,
    pub mode: ContextMode,
}

impl ProviderDescriptor {
    /// Fails unless the provider was built for exactly this vocabulary.
    pub fn check_binding(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_size != vocab.len() {
            return Err(CapeError::Binding(format!(
                "provider vocabulary has {} tokens, loaded vocabulary has {}",
                self.vocab_size,
                vocab.len()
            )));
        }
        let local = vocab.sha256();
        if self.vocabulary_hash != local {
            return Err(CapeError::Binding(format!(
                "provider vocabulary checksum {} does not match {}",
                self.vocabulary_hash, local
            )));
        }
        Ok(())
    }
}

pub trait LogitProvider: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>>;

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector>;

    fn embedding_table(&self) -> Result<EmbeddingTable>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        (**self).descriptor()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector> {
        (**self).context_logits(window)
    }

    fn embedding_table(&self) -> Result<EmbeddingTable> {
        (**self).embedding_table()
    }
}

pub(crate) fn check_logit_length(len: usize, vocab_size: usize) -> Result<()> {
    if len == vocab_size {
        Ok(())
    } else {
        Err(CapeError::Provider(format!("logit vector has {len} entries but the vocabulary has {vocab_size}")))
    }
}

/// Splits on whitespace and looks each piece up verbatim.
pub fn whitespace_tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|piece| vocab.id(piece).ok_or_else(|| CapeError::UnknownToken(piece.to_string())))
        .collect()
}

type LogitFn = dyn Fn(&ContextWindow<'_>) -> Vec<f64> + Send + Sync;

/// In-memory provider computing logits with a closure.
pub struct ClosureProvider {
    descriptor: ProviderDescriptor,
    vocab: Arc<Vocabulary>,
    table: Arc<EmbeddingTable>,
    logits: Box<LogitFn>,
}

impl ClosureProvider {
    pub fn new<F>(vocab: Arc<Vocabulary>, table: Arc<EmbeddingTable>, mode: ContextMode, logits: F) -> Result<Self>
    where
        F: Fn(&ContextWindow<'_>) -> Vec<f64> + Send + Sync + 'static,
    {
        table.check_vocab(&vocab)?;
        Ok(Self {
            descriptor: ProviderDescriptor {
                kind: ProviderKind::Memory,
                vocabulary_hash: vocab.sha256(),
                vocab_size: vocab.len(),
                model_name: "closure".into(),
                mode,
            },
            vocab,
            table,
            logits: Box::new(logits),
        })
    }
}

impl LogitProvider for ClosureProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        whitespace_tokenize(text, &self.vocab)
    }

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector> {
        let values = (self.logits)(window);
        check_logit_length(values.len(), self.vocab.len())?;
        LogitVector::new(values, window.context_id())
    }

    fn embedding_table(&self) -> Result<EmbeddingTable> {
        Ok((*self.table).clone())
    }
}
