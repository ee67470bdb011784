//! Directory-backed provider replaying stored logit vectors.
//!
//! Layout:
//!
//! ```text
//! meta.json       {"model_name", "mode", "vocab_sha256", "vocab_size", "embeddings"?}
//! manifest.json   {"records": [{"prompt_index", "prompt_sha256", "position", "file"}]}
//! records/*.bin   |V| little-endian f32 logits per (prompt, position)
//! ```
//!
//! Records are looked up by the SHA-256 of the prompt's token ids and the
//! target position. Tokenization accepts whitespace-pretokenized text only.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    check_logit_length, prompt_key, whitespace_tokenize, ContextMode, ContextWindow, LogitProvider, ProviderDescriptor,
    ProviderKind,
};
use crate::error::{CapeError, Result};
use crate::fsutil::{write_atomic, write_json_atomic};
use crate::utility::LogitVector;
use crate::vocab::{load_embeddings, EmbeddingTable, TokenId, Vocabulary};

const META_FILE: &str = "meta.json";
const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_DIR: &str = "records";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderMeta {
    pub model_name: String,
    pub mode: ContextMode,
    pub vocab_sha256: String,
    pub vocab_size: usize,
    /// Embedding file relative to the directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub prompt_index: usize,
    pub prompt_sha256: String,
    pub position: usize,
    pub file: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    records: Vec<ManifestEntry>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CapeError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CapeError::format(path, e.to_string()))
}

pub struct FileProvider {
    dir: PathBuf,
    descriptor: ProviderDescriptor,
    vocab: Arc<Vocabulary>,
    records: HashMap<(String, usize), PathBuf>,
    embeddings: Option<PathBuf>,
}

impl std::fmt::Debug for FileProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileProvider").field("dir", &self.dir).field("records", &self.records.len()).finish()
    }
}

impl FileProvider {
    /// Opens a fixture directory and binds it to `vocab`.
    pub fn open(dir: impl AsRef<Path>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let meta: ProviderMeta = read_json(&dir.join(META_FILE))?;
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        let descriptor = ProviderDescriptor {
            kind: ProviderKind::File,
            vocabulary_hash: meta.vocab_sha256.clone(),
            vocab_size: meta.vocab_size,
            model_name: meta.model_name.clone(),
            mode: meta.mode,
        };
        descriptor.check_binding(&vocab)?;
        let records = manifest.records.into_iter().map(|e| ((e.prompt_sha256, e.position), dir.join(e.file))).collect();
        let embeddings = meta.embeddings.map(|e| dir.join(e));
        Ok(Self { dir, descriptor, vocab, records, embeddings })
    }

    /// Serves embeddings from `path` instead of the one named in `meta.json`.
    pub fn with_embeddings(mut self, path: impl Into<PathBuf>) -> Self {
        self.embeddings = Some(path.into());
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn has_record(&self, token_ids: &[TokenId], position: usize) -> bool {
        self.records.contains_key(&(prompt_key(token_ids), position))
    }
}

impl LogitProvider for FileProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        whitespace_tokenize(text, &self.vocab)
    }

    fn context_logits(&self, window: &ContextWindow<'_>) -> Result<LogitVector> {
        if window.mode != self.descriptor.mode {
            return Err(CapeError::Provider(format!(
                "fixture holds {} logits, {} requested",
                self.descriptor.mode, window.mode
            )));
        }
        let key = (window.prompt_key(), window.target_position);
        let path = self
            .records
            .get(&key)
            .ok_or_else(|| CapeError::MissingRecord { prompt_sha256: key.0.clone(), position: key.1 })?;
        let bytes = std::fs::read(path).map_err(|e| CapeError::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(CapeError::format(path, "record length is not a multiple of 4 bytes"));
        }
        check_logit_length(bytes.len() / 4, self.vocab.len())?;
        let values =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64).collect();
        LogitVector::new(values, window.context_id())
    }

    fn embedding_table(&self) -> Result<EmbeddingTable> {
        let path = self
            .embeddings
            .as_ref()
            .ok_or_else(|| CapeError::Provider(format!("{} names no embedding file", self.dir.display())))?;
        load_embeddings(path, &self.vocab)
    }
}

/// Builds a fixture directory one record at a time.
#[derive(Debug)]
pub struct FixtureWriter {
    dir: PathBuf,
    meta: ProviderMeta,
    prompts: HashMap<String, usize>,
    entries: HashMap<(String, usize), ManifestEntry>,
}

impl FixtureWriter {
    pub fn create(dir: impl AsRef<Path>, meta: ProviderMeta) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let records = dir.join(RECORDS_DIR);
        std::fs::create_dir_all(&records).map_err(|e| CapeError::io(&records, e))?;
        Ok(Self { dir, meta, prompts: HashMap::new(), entries: HashMap::new() })
    }

    /// Stores logits for `(token_ids, position)`, replacing an earlier
    /// record for the same key. Values are stored as f32.
    pub fn record(&mut self, token_ids: &[TokenId], position: usize, values: &[f64]) -> Result<()> {
        check_logit_length(values.len(), self.meta.vocab_size)?;
        let key = prompt_key(token_ids);
        let next = self.prompts.len();
        let prompt_index = *self.prompts.entry(key.clone()).or_insert(next);
        let file = format!("{RECORDS_DIR}/p{prompt_index:06}_{position:05}.bin");
        let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write_atomic(&self.dir.join(&file), &bytes)?;
        self.entries
            .insert((key.clone(), position), ManifestEntry { prompt_index, prompt_sha256: key, position, file });
        Ok(())
    }

    /// Writes `embeddings.bin` into the directory and names it in the meta.
    pub fn write_embeddings(&mut self, table: &EmbeddingTable, tokens: Option<&[String]>) -> Result<()> {
        let name = "embeddings.bin";
        write_atomic(&self.dir.join(name), &table.to_binary_bytes(tokens))?;
        self.meta.embeddings = Some(name.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `manifest.json` (sorted by prompt then position) and `meta.json`.
    pub fn finish(&self) -> Result<PathBuf> {
        let mut records: Vec<ManifestEntry> = self.entries.values().cloned().collect();
        records.sort_by_key(|e| (e.prompt_index, e.position));
        write_json_atomic(&self.dir.join(MANIFEST_FILE), &Manifest { records })?;
        write_json_atomic(&self.dir.join(META_FILE), &self.meta)?;
        Ok(self.dir.clone())
    }
}
