//! Loading vocabulary, embeddings, provider and caches from settings.

use std::sync::Arc;

use cape_core::mechanism::MechanismContext;
use cape_core::providers::{FileProvider, HttpConfig, HttpProvider, LogitProvider};
use cape_core::vocab::{
    load_embeddings, load_nonsensitive, DistanceCache, EmbeddingTable, NonSensitiveLoad, NonSensitiveSet, Vocabulary,
};

use crate::exit::CliError;
use crate::settings::{is_url, Settings, PROVIDER_ENV};

pub struct Workspace {
    pub vocab: Arc<Vocabulary>,
    pub provider: Option<Box<dyn LogitProvider>>,
    pub table: Arc<EmbeddingTable>,
    pub distances: DistanceCache,
    pub nonsensitive: NonSensitiveSet,
}

pub fn load_vocab(settings: &Settings) -> Result<Arc<Vocabulary>, CliError> {
    let path = settings
        .vocab
        .as_ref()
        .ok_or_else(|| CliError::Config("--vocab is required (in flags or config file)".into()))?;
    Ok(Arc::new(Vocabulary::load(path).map_err(CliError::from_config)?))
}

pub fn open_provider(spec: &str, vocab: Arc<Vocabulary>) -> Result<Box<dyn LogitProvider>, CliError> {
    let provider: Box<dyn LogitProvider> = if is_url(spec) {
        Box::new(HttpProvider::connect(HttpConfig::new(spec), vocab).map_err(CliError::Provider)?)
    } else {
        Box::new(FileProvider::open(spec, vocab).map_err(CliError::Provider)?)
    };
    log::info!("provider {} ({}, {} logits)", spec, provider.descriptor().model_name, provider.descriptor().mode);
    Ok(provider)
}

pub fn require_provider(settings: &Settings, vocab: Arc<Vocabulary>) -> Result<Box<dyn LogitProvider>, CliError> {
    let spec = settings
        .provider
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("--provider is required (flag, config file or {PROVIDER_ENV})")))?;
    open_provider(spec, vocab)
}

fn load_nonsensitive_set(settings: &Settings, vocab: &Vocabulary) -> Result<NonSensitiveSet, CliError> {
    let NonSensitiveLoad { set, missing } = match settings.nonsensitive.as_deref() {
        Some("none") => return Ok(NonSensitiveSet::empty()),
        Some(path) => load_nonsensitive(path, vocab).map_err(CliError::from_config)?,
        None => NonSensitiveSet::default_for(vocab),
    };
    if !missing.is_empty() {
        log::debug!("{} non-sensitive entries are not in the vocabulary", missing.len());
    }
    Ok(set)
}

impl Workspace {
    /// Loads everything. The provider is opened when configured, or always
    /// when `need_provider` is set. Embeddings come from the settings, else
    /// from the provider.
    pub fn load(settings: &mut Settings, need_provider: bool) -> Result<Self, CliError> {
        let vocab = load_vocab(settings)?;
        let provider = if need_provider || settings.provider.is_some() {
            Some(require_provider(settings, vocab.clone())?)
        } else {
            None
        };
        if let Some(p) = &provider {
            settings.mode.get_or_insert(p.descriptor().mode);
        }
        let table = match (&settings.embeddings, &provider) {
            (Some(path), _) => load_embeddings(path, &vocab).map_err(CliError::from_config)?,
            (None, Some(p)) => p.embedding_table().map_err(CliError::Provider)?,
            (None, None) => {
                return Err(CliError::Config("--embeddings or --provider is required".into()));
            }
        };
        table.check_vocab(&vocab).map_err(CliError::from_config)?;
        let table = Arc::new(table);
        let distances = match &settings.distances {
            Some(path) if path.exists() => DistanceCache::load(path, table.clone()).map_err(CliError::from_config)?,
            Some(path) => {
                log::warn!("distance cache {} not found, computing rows on demand", path.display());
                DistanceCache::new(table.clone())
            }
            None => DistanceCache::new(table.clone()),
        };
        let nonsensitive = load_nonsensitive_set(settings, &vocab)?;
        Ok(Self { vocab, provider, table, distances, nonsensitive })
    }

    pub fn provider(&self) -> Result<&dyn LogitProvider, CliError> {
        self.provider.as_deref().ok_or_else(|| CliError::Config("this command needs a provider".into()))
    }

    pub fn context(&self) -> Result<MechanismContext<'_>, CliError> {
        Ok(MechanismContext {
            vocab: &self.vocab,
            nonsensitive: &self.nonsensitive,
            distances: &self.distances,
            provider: self.provider()?,
        })
    }
}
