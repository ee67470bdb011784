//! Record mode: pass requests through to a live provider and store every
//! logit vector in a fixture directory for later offline replay.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use super::{ContextWindow, FixtureWriter, LogitProvider, ProviderDescriptor, ProviderMeta};
use crate::error::Result;
use crate::utility::LogitVector;
use crate::vocab::{EmbeddingTable, TokenId, Vocabulary};

pub struct RecordingProvider<P> {
    inner: P,
    writer: Mutex<FixtureWriter>,
    warned_precision: AtomicBool,
}

impl<P: LogitProvider> RecordingProvider<P> {
    pub fn new(inner: P, dir: impl AsRef<std::path::Path>, vocab: &Vocabulary) -> Result<Self> {
        let d = inner.descriptor();
        d.check_binding(vocab)?;
        let meta = ProviderMeta {
            model_name: d.model_name.clone(),
            mode: d.mode,
            vocab_sha256: d.vocabulary_hash.clone(),
            vocab_size: d.vocab_size,
            embeddings: None,
        };
        Ok(Self {
            writer: Mutex::new(FixtureWriter::create(dir, meta)?),
            inner,
            warned_precision: AtomicBool::new(false),
        })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Fetches the embedding table from the inner provider and stores it.
    pub fn record_embeddings(&self, vocab: &Vocabulary) -> Result<EmbeddingTable> {
        let table = self.inner.embedding_table()?;
        self.writer.lock().expect("fixture writer poisoned").write_embeddings(&table, Some(vocab.tokens()))?;
        Ok(table)
    }

    /// Writes the manifest and meta files. Records are already on disk.
    pub fn finish(&self) -> Result<std::path::PathBuf> {
        self.writer.lock().expect("fixture writer poisoned").finish()
    }

    pub fn recorded(&self) -> usize {
        self.writer.lock().expect("fixture writer poisoned").len()
    }
}

impl<P: LogitProvider> LogitProvider for RecordingProvider<P> {
    fn descriptor(&self) -> &ProviderDescriptor {
        self.inner.descriptor()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector> {
        let logits = self.inner.context_logits(window)?;
        if !self.warned_precision.load(Ordering::Relaxed) && logits.values.iter().any(|&v| (v as f32) as f64 != v) {
            self.warned_precision.store(true, Ordering::Relaxed);
            log::warn!("provider logits are not f32-exact; replayed runs may differ from this one");
        }
        self.writer.lock().expect("fixture writer poisoned").record(
            window.token_ids,
            window.target_position,
            &logits.values,
        )?;
        Ok(logits)
    }

    fn embedding_table(&self) -> Result<EmbeddingTable> {
        self.inner.embedding_table()
    }
}
