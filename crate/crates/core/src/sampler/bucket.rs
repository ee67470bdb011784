use serde::Serialize;

use crate::vocab::TokenId;

/// One nonempty equal-width utility interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// Position of the interval among the `n_requested` equal-width slots.
    pub slot: usize,
    pub mean_utility: f64,
    pub member_ids: Vec<TokenId>,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// Equal-width partition of a utility vector, empty intervals dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSet {
    /// Retained buckets in ascending utility order.
    pub buckets: Vec<Bucket>,
    pub n_requested: usize,
    pub u_min: f64,
    pub width: f64,
    /// Largest gap between two bucket means (`max mean - min mean`).
    pub sensitivity: f64,
    /// `ln(max |b| / min |b|)` over retained buckets.
    pub epsilon_prime: f64,
    #[serde(skip)]
    token_bucket: Vec<u32>,
}

impl BucketSet {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bucket.len()
    }

    /// Index (into `buckets`) of the bucket holding `token`.
    pub fn bucket_of(&self, token: TokenId) -> usize {
        self.token_bucket[token.index()] as usize
    }

    /// Lower edge of equal-width slot `slot`.
    pub fn edge(&self, slot: usize) -> f64 {
        self.u_min + slot as f64 * self.width
    }

    pub fn max_cardinality(&self) -> usize {
        self.buckets.iter().map(Bucket::len).max().unwrap_or(0)
    }

    pub fn min_cardinality(&self) -> usize {
        self.buckets.iter().map(Bucket::len).min().unwrap_or(0)
    }
}

/// Assigns every token to slot `floor((u - u_min) / width)` of `n_buckets`
/// equal-width slots, clamping `u_max` into the last slot. Slots are
/// half-open `[edge(i), edge(i + 1))`; the index is nudged so that this holds
/// exactly for the floating-point edges. Empty slots are skipped.
pub fn bucketize(scores: &[f64], n_buckets: usize) -> BucketSet {
    assert!(n_buckets >= 1, "need at least one bucket");
    assert!(!scores.is_empty(), "cannot bucketize an empty utility vector");
    let (u_min, u_max) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| (lo.min(u), hi.max(u)));
    let width = (u_max - u_min) / n_buckets as f64;
    let last = n_buckets - 1;
    let edge = |slot: usize| u_min + slot as f64 * width;

    let slot_of = |u: f64| -> usize {
        if width.is_nan() || width <= 0.0 {
            return 0;
        }
        let mut s = (((u - u_min) / width).floor().max(0.0) as usize).min(last);
        while s > 0 && u < edge(s) {
            s -= 1;
        }
        while s < last && u >= edge(s + 1) {
            s += 1;
        }
        s
    };

    let mut members: Vec<Vec<TokenId>> = vec![Vec::new(); n_buckets];
    let mut sums = vec![0.0f64; n_buckets];
    for (i, &u) in scores.iter().enumerate() {
        let s = slot_of(u);
        members[s].push(TokenId::from_index(i));
        sums[s] += u;
    }

    let mut token_bucket = vec![0u32; scores.len()];
    let mut buckets = Vec::new();
    for (slot, (ids, sum)) in members.into_iter().zip(sums).enumerate() {
        if ids.is_empty() {
            continue;
        }
        let index = buckets.len() as u32;
        for id in &ids {
            token_bucket[id.index()] = index;
        }
        buckets.push(Bucket { slot, mean_utility: sum / ids.len() as f64, member_ids: ids });
    }

    let (m_lo, m_hi) = buckets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.mean_utility), hi.max(b.mean_utility)));
    let max_card = buckets.iter().map(Bucket::len).max().unwrap_or(1);
    let min_card = buckets.iter().map(Bucket::len).min().unwrap_or(1);

    BucketSet {
        buckets,
        n_requested: n_buckets,
        u_min,
        width,
        sensitivity: m_hi - m_lo,
        epsilon_prime: (max_card as f64 / min_card as f64).ln(),
        token_bucket,
    }
}
