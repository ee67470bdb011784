#![allow(dead_code)]

pub mod toy;

use std::path::PathBuf;
use std::sync::Arc;

use cape_core::mechanism::{BoundSetting, MechanismConfig, MechanismContext};
use cape_core::providers::{prompt_key, ClosureProvider, ContextMode, FileProvider};
use cape_core::rng::{derive_stream, unit_f64};
use cape_core::utility::ClipBound;
use cape_core::vocab::{load_embeddings, DistanceCache, EmbeddingTable, NonSensitiveSet, TokenId, Vocabulary};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub struct Fixture<P> {
    pub vocab: Arc<Vocabulary>,
    pub table: Arc<EmbeddingTable>,
    pub distances: DistanceCache,
    pub nonsensitive: NonSensitiveSet,
    pub provider: P,
}

impl<P: cape_core::providers::LogitProvider> Fixture<P> {
    pub fn ctx(&self) -> MechanismContext<'_> {
        MechanismContext {
            vocab: &self.vocab,
            nonsensitive: &self.nonsensitive,
            distances: &self.distances,
            provider: &self.provider,
        }
    }

    pub fn ids(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.vocab.id(t).expect("token in vocab")).collect()
    }
}

pub fn load_toy() -> Fixture<FileProvider> {
    let dir = toy_dir();
    let vocab = Arc::new(Vocabulary::load(dir.join("vocab.txt")).unwrap());
    let table = Arc::new(load_embeddings(dir.join("embeddings.txt"), &vocab).unwrap());
    let provider = FileProvider::open(dir.join("provider"), vocab.clone()).unwrap();
    Fixture {
        distances: DistanceCache::new(table.clone()),
        nonsensitive: NonSensitiveSet::default_for(&vocab).set,
        vocab,
        table,
        provider,
    }
}

pub fn toy_prompts(f: &Fixture<FileProvider>) -> Vec<Vec<TokenId>> {
    toy::PROMPTS.iter().map(|p| f.ids(p)).collect()
}

fn normal(rng: &mut cape_core::rng::StreamRng) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_table(n: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let mut rng = derive_stream(seed, "test-embedding", &[i as u64]);
            (0..dim).map(|_| normal(&mut rng) as f32).collect()
        })
        .collect();
    EmbeddingTable::from_rows(&rows).unwrap()
}

/// Random vocabulary `t0..t{n-1}` with Gaussian embeddings and logits that
/// depend on the whole window, no non-sensitive tokens.
pub fn synthetic(n: usize, seed: u64, mode: ContextMode) -> Fixture<ClosureProvider> {
    let vocab = Arc::new(Vocabulary::from_tokens((0..n).map(|i| format!("t{i}"))).unwrap());
    let table = Arc::new(random_table(n, 8, seed));
    let provider = ClosureProvider::new(vocab.clone(), table.clone(), mode, move |w| {
        let key = u64::from_str_radix(&prompt_key(w.token_ids)[..15], 16).unwrap();
        let mut rng = derive_stream(seed, "test-logits", &[key, w.target_position as u64]);
        (0..n).map(|_| 3.0 * normal(&mut rng) + 2.0).collect()
    })
    .unwrap();
    Fixture {
        distances: DistanceCache::new(table.clone()),
        nonsensitive: NonSensitiveSet::empty(),
        vocab,
        table,
        provider,
    }
}

pub fn fixed_config(epsilon: f64, seed: u64, bound: f64) -> MechanismConfig {
    let mut c = MechanismConfig::new(epsilon, seed);
    c.bound = BoundSetting::Fixed(ClipBound::new(bound).unwrap());
    c
}
