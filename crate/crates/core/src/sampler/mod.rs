//! Private selection over a utility vector: the standard exponential
//! mechanism and its equal-width bucketized variant.
//!
//! The bucketized mechanism selects bucket `b` with probability proportional
//! to `exp(eps * mean(b) / (2 * sensitivity))` and then a member uniformly, so
//! a token in `b` has probability `P(b) / |b|`. It satisfies
//! `(eps + eps')`-DP with `eps' = ln(max |b| / min |b|)`.
//!
//! All probability arithmetic is done in log space with max subtraction.

mod bucket;
pub mod dp_check;

use rand_chacha::rand_core::RngCore;
use serde::Serialize;

use crate::error::{CapeError, Result};
use crate::rng::{below, unit_f64};
use crate::vocab::TokenId;

pub use bucket::{bucketize, Bucket, BucketSet};

/// Result of one bucketized draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingOutcome {
    pub bucket_index: usize,
    pub token_id: TokenId,
    pub effective_epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(CapeError::InvalidParameter(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

/// `x_i - logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&x| x - lse).collect()
}

pub fn standard_em_log_probabilities(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(CapeError::InvalidParameter(format!("sensitivity must be positive and finite, got {sensitivity}")));
    }
    if let Some(i) = scores.iter().position(|u| !u.is_finite()) {
        return Err(CapeError::NonFinite { row: 0, column: i, value: scores[i] });
    }
    let scale = epsilon / (2.0 * sensitivity);
    let exps: Vec<f64> = scores.iter().map(|&u| scale * u).collect();
    Ok(log_softmax(&exps))
}

/// `p[j] ∝ exp(eps * u[j] / (2 * sensitivity))` over all candidates.
pub fn standard_em_probabilities(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
    Ok(standard_em_log_probabilities(scores, epsilon, sensitivity)?.into_iter().map(f64::exp).collect())
}

impl BucketSet {
    /// Log selection probability of each retained bucket, scaling means by
    /// an explicit sensitivity. A zero sensitivity means every candidate has
    /// the same utility and selection is uniform over tokens.
    pub fn log_selection_with(&self, epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
        check_epsilon(epsilon)?;
        if sensitivity == 0.0 {
            let n = self.vocab_size() as f64;
            return Ok(self.buckets.iter().map(|b| (b.len() as f64 / n).ln()).collect());
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(CapeError::InvalidParameter(format!(
                "sensitivity must be nonnegative and finite, got {sensitivity}"
            )));
        }
        let scale = epsilon / (2.0 * sensitivity);
        let exps: Vec<f64> = self.buckets.iter().map(|b| scale * b.mean_utility).collect();
        Ok(log_softmax(&exps))
    }

    pub fn log_selection(&self, epsilon: f64) -> Result<Vec<f64>> {
        self.log_selection_with(epsilon, self.sensitivity)
    }

    pub fn selection_probabilities(&self, epsilon: f64) -> Result<Vec<f64>> {
        Ok(self.log_selection(epsilon)?.into_iter().map(f64::exp).collect())
    }

    /// Per-token log probabilities `log P(b) - ln |b|`.
    pub fn token_log_probabilities_with(&self, epsilon: f64, sensitivity: f64) -> Result<Vec<f64>> {
        let sel = self.log_selection_with(epsilon, sensitivity)?;
        let mut out = vec![0.0; self.vocab_size()];
        for (b, lp) in self.buckets.iter().zip(sel) {
            let per = lp - (b.len() as f64).ln();
            for id in &b.member_ids {
                out[id.index()] = per;
            }
        }
        Ok(out)
    }

    pub fn token_log_probabilities(&self, epsilon: f64) -> Result<Vec<f64>> {
        self.token_log_probabilities_with(epsilon, self.sensitivity)
    }

    pub fn effective_epsilon(&self, epsilon: f64) -> f64 {
        epsilon + self.epsilon_prime
    }
}

/// Per-token probabilities of the bucketized mechanism; sums to one.
pub fn bucket_probabilities(buckets: &BucketSet, epsilon: f64) -> Result<Vec<f64>> {
    Ok(buckets.token_log_probabilities(epsilon)?.into_iter().map(f64::exp).collect())
}

/// Inverse-CDF draw of an index from a probability vector. Zero-probability
/// entries are never returned.
pub fn draw_index<R: RngCore + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = unit_f64(rng);
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Selects a bucket with the exponential mechanism, then a member uniformly.
pub fn sample<R: RngCore + ?Sized>(buckets: &BucketSet, epsilon: f64, rng: &mut R) -> Result<SamplingOutcome> {
    let sel = buckets.selection_probabilities(epsilon)?;
    let bucket_index = draw_index(&sel, rng);
    let members = &buckets.buckets[bucket_index].member_ids;
    let token_id = members[below(rng, members.len())];
    Ok(SamplingOutcome { bucket_index, token_id, effective_epsilon: buckets.effective_epsilon(epsilon) })
}

/// One draw from the standard exponential mechanism.
pub fn sample_standard<R: RngCore + ?Sized>(
    scores: &[f64],
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<TokenId> {
    let p = standard_em_probabilities(scores, epsilon, sensitivity)?;
    Ok(TokenId::from_index(draw_index(&p, rng)))
}
