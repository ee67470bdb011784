//! Deterministic generator for the toy fixture under `tests/fixtures/toy`.
//!
//! Tokens come in semantic groups. Embeddings place each group around its
//! own random center; stored logits favor the masked token's group, which is
//! roughly how a masked language model scores plausible fillers.

use std::path::Path;

use cape_core::providers::{prompt_key, ContextMode, FixtureWriter, ProviderMeta};
use cape_core::rng::{derive_stream, unit_f64, StreamRng};
use cape_core::vocab::{EmbeddingTable, TokenId, Vocabulary};

pub const GROUPS: &[&[&str]] = &[
    &[
        "it", "this", "that", "he", "she", "they", "we", "i", "you", "the", "a", "an", "is", "was", "be", "very",
        "too", "so", "and", "but", "or", "not", "of", "to", "in", "on", "for", "with", "as", "at",
    ],
    &[".", ",", "!", "?", ";", ":", "--", "'s", "\"", "(", ")", "..."],
    &["slow", "sluggish", "tedious", "dull", "boring", "plodding", "lethargic", "leisurely", "unhurried", "gradual"],
    &["fast", "quick", "rapid", "swift", "speedy", "brisk", "hasty"],
    &["good", "great", "fine", "excellent", "nice", "wonderful", "superb", "solid"],
    &["bad", "poor", "awful", "terrible", "weak", "lame", "mediocre"],
    &["film", "movie", "story", "plot", "script", "scene", "cast", "acting", "picture", "show"],
    &["book", "novel", "text", "volume", "tale", "read"],
    &["really", "quite", "rather", "extremely", "somewhat", "barely", "truly", "pretty", "utterly"],
    &["feels", "seems", "looks", "moves", "runs", "drags", "crawls"],
];

pub const PROMPTS: &[&str] = &[
    "it 's slow -- very , very slow .",
    "this is a good book .",
    "the film drags , but the cast is great .",
    "a quick , solid story .",
];

pub const DIM: usize = 16;
const SEED: u64 = 20240607;

pub fn tokens() -> Vec<&'static str> {
    GROUPS.iter().flat_map(|g| g.iter().copied()).collect()
}

fn group_of(index: usize) -> usize {
    let mut i = index;
    for (g, members) in GROUPS.iter().enumerate() {
        if i < members.len() {
            return g;
        }
        i -= members.len();
    }
    unreachable!("token index beyond the vocabulary")
}

fn normal(rng: &mut StreamRng) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn embeddings() -> EmbeddingTable {
    let n = tokens().len();
    let centers: Vec<Vec<f64>> = (0..GROUPS.len())
        .map(|g| {
            let mut rng = derive_stream(SEED, "toy-center", &[g as u64]);
            (0..DIM).map(|_| 3.0 * normal(&mut rng)).collect()
        })
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| {
            let mut rng = derive_stream(SEED, "toy-embedding", &[i as u64]);
            centers[group_of(i)].iter().map(|c| (c + 0.6 * normal(&mut rng)) as f32).collect()
        })
        .collect();
    EmbeddingTable::from_rows(&rows).expect("toy embeddings are finite")
}

/// Logits for the masked position of `prompt`.
pub fn logits(prompt: &[TokenId], position: usize, vocab_size: usize) -> Vec<f64> {
    let target = prompt[position].index();
    let group = group_of(target);
    let key = u64::from_str_radix(&prompt_key(prompt)[..15], 16).expect("hex prefix");
    let mut rng = derive_stream(SEED, "toy-logits", &[key, position as u64]);
    (0..vocab_size)
        .map(|y| {
            let noise = normal(&mut rng);
            let base = if y == target {
                9.0
            } else if group_of(y) == group {
                6.5
            } else {
                -1.0
            };
            // stored as f32, so round here to keep replays exact
            (base + 1.2 * noise) as f32 as f64
        })
        .collect()
}

pub fn build(dir: &Path) {
    let vocab = Vocabulary::from_tokens(tokens()).expect("unique toy tokens");
    std::fs::create_dir_all(dir).expect("create fixture dir");
    let mut text = String::new();
    for t in vocab.tokens() {
        text.push_str(t);
        text.push('\n');
    }
    std::fs::write(dir.join("vocab.txt"), text).expect("write vocab");

    let table = embeddings();
    let mut txt = Vec::new();
    table.write_text(&mut txt, &vocab).expect("text embeddings");
    std::fs::write(dir.join("embeddings.txt"), txt).expect("write embeddings");

    let mut prompts = String::new();
    for p in PROMPTS {
        prompts.push_str(p);
        prompts.push('\n');
    }
    std::fs::write(dir.join("prompts.txt"), prompts).expect("write prompts");

    let meta = ProviderMeta {
        model_name: "toy-masked-lm".into(),
        mode: ContextMode::Bidirectional,
        vocab_sha256: vocab.sha256(),
        vocab_size: vocab.len(),
        embeddings: None,
    };
    let mut writer = FixtureWriter::create(dir.join("provider"), meta).expect("fixture writer");
    writer.write_embeddings(&table, Some(vocab.tokens())).expect("binary embeddings");
    for p in PROMPTS {
        let ids: Vec<TokenId> = p.split_whitespace().map(|t| vocab.id(t).expect("prompt token in vocab")).collect();
        for pos in 0..ids.len() {
            writer.record(&ids, pos, &logits(&ids, pos, vocab.len())).expect("record");
        }
    }
    writer.finish().expect("finish fixture");
}
