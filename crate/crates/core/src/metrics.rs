//! Utility and empirical privacy metrics.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::Result;
use crate::mechanism::{Mechanism, Selection};
use crate::par::Execution;
use crate::rng::derive_stream;
use crate::sampler::{bucket_probabilities, bucketize, draw_index, sample, standard_em_probabilities};
use crate::utility::UtilityVector;
use crate::vocab::TokenId;

/// RNG domain for mapping trials.
pub const MAPPING_STREAM: &str = "mapping";

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Rouge-L F1 over token sequences; 0 when nothing is shared (including
/// when either side is empty).
pub fn rouge_l_f1<T: PartialEq>(reference: &[T], candidate: &[T]) -> f64 {
    let lcs = lcs_len(reference, candidate);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MappingStats {
    pub token_id: TokenId,
    pub trials: usize,
    /// Number of distinct replacements, `S_t`.
    pub distinct_outputs: usize,
    pub retention_count: usize,
    /// `N_t = retention_count / trials`.
    pub retention_ratio: f64,
}

/// Runs the mechanism `trials` times on the token at `position` of a fixed
/// context, each trial with its own stream keyed by `(token, trial)`.
pub fn mapping_stats(
    mech: &Mechanism<'_>,
    token_ids: &[TokenId],
    position: usize,
    trials: usize,
) -> Result<MappingStats> {
    assert!(trials >= 1, "mapping stats need at least one trial");
    let token = token_ids[position];
    let outputs: Vec<TokenId> = if mech.keeps(token) {
        vec![token; trials]
    } else {
        let cfg = mech.config();
        let u = mech.utility_at(token_ids, position)?;
        let stream = |t: usize| derive_stream(cfg.seed, MAPPING_STREAM, &[token.0 as u64, t as u64]);
        match cfg.selection {
            Selection::Bucketized => {
                let set = bucketize(&u.scores, cfg.n_buckets);
                mech.execution()
                    .try_map_range(trials, |t| sample(&set, cfg.epsilon, &mut stream(t)).map(|o| o.token_id))?
            }
            Selection::Standard => {
                let p = standard_em_probabilities(&u.scores, cfg.epsilon, mech.standard_sensitivity())?;
                mech.execution().map_range(trials, |t| TokenId::from_index(draw_index(&p, &mut stream(t))))
            }
        }
    };
    let distinct_outputs = outputs.iter().collect::<HashSet<_>>().len();
    let retention_count = outputs.iter().filter(|&&o| o == token).count();
    Ok(MappingStats {
        token_id: token,
        trials,
        distinct_outputs,
        retention_count,
        retention_ratio: retention_count as f64 / trials as f64,
    })
}

/// Mean and variance of the number of distinct values in `n` independent
/// draws from `probs`.
pub fn distinct_count_moments(probs: &[f64], n: usize, exec: Execution) -> (f64, f64) {
    let n = n as i32;
    let miss: Vec<f64> = probs.iter().map(|&p| (1.0 - p).powi(n)).collect();
    let mean: f64 = miss.iter().map(|m| 1.0 - m).sum();
    let var_single: f64 = miss.iter().map(|m| m * (1.0 - m)).sum();
    let cov: f64 = exec
        .map_range(probs.len(), |y| {
            let mut s = 0.0;
            for z in y + 1..probs.len() {
                s += (1.0 - probs[y] - probs[z]).max(0.0).powi(n) - miss[y] * miss[z];
            }
            s
        })
        .into_iter()
        .sum();
    (mean, (var_single + 2.0 * cov).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub token_id: TokenId,
    pub probability: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailBound {
    pub k: usize,
    /// `k * e^eps / (N - k)`.
    pub analytic: f64,
    /// Standard-EM mass on the `k` most likely candidates over the rest.
    pub standard_empirical: f64,
    pub bucketized_empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfDiagnostic {
    pub epsilon: f64,
    pub n_buckets: usize,
    /// Ascending by probability.
    pub standard: Vec<CdfPoint>,
    pub bucketized: Vec<CdfPoint>,
    pub tail_threshold: f64,
    /// Total mass on candidates whose own probability is below the threshold.
    pub standard_tail_mass: f64,
    pub bucketized_tail_mass: f64,
    pub bounds: Vec<TailBound>,
}

pub const DEFAULT_TAIL_THRESHOLD: f64 = 1e-4;

/// `k * e^eps / (N - k)`.
pub fn long_tail_bound(epsilon: f64, k: usize, n: usize) -> f64 {
    k as f64 * epsilon.exp() / (n - k) as f64
}

fn cdf(probs: &[f64]) -> Vec<CdfPoint> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut cum = 0.0;
    order
        .into_iter()
        .map(|i| {
            cum += probs[i];
            CdfPoint { token_id: TokenId::from_index(i), probability: probs[i], cumulative: cum }
        })
        .collect()
}

fn top_k_ratio(sorted_desc: &[f64], k: usize) -> f64 {
    let top: f64 = sorted_desc[..k].iter().sum();
    let rest: f64 = sorted_desc[k..].iter().sum();
    top / rest
}

/// Sorted probabilities of the standard and bucketized mechanisms on one
/// utility vector. The standard mechanism uses sensitivity `B^lambda_L`.
pub fn cdf_diagnostic(u: &UtilityVector, epsilon: f64, n_buckets: usize, ks: &[usize]) -> Result<CdfDiagnostic> {
    let std_p = standard_em_probabilities(&u.scores, epsilon, u.upper_bound())?;
    let bkt_p = bucket_probabilities(&bucketize(&u.scores, n_buckets), epsilon)?;
    let tail = |p: &[f64]| p.iter().filter(|&&x| x < DEFAULT_TAIL_THRESHOLD).sum::<f64>();
    let desc = |p: &[f64]| {
        let mut v = p.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let (sd, bd) = (desc(&std_p), desc(&bkt_p));
    let n = u.scores.len();
    let bounds = ks
        .iter()
        .filter(|&&k| k >= 1 && k < n)
        .map(|&k| TailBound {
            k,
            analytic: long_tail_bound(epsilon, k, n),
            standard_empirical: top_k_ratio(&sd, k),
            bucketized_empirical: top_k_ratio(&bd, k),
        })
        .collect();
    Ok(CdfDiagnostic {
        epsilon,
        n_buckets,
        standard_tail_mass: tail(&std_p),
        bucketized_tail_mass: tail(&bkt_p),
        standard: cdf(&std_p),
        bucketized: cdf(&bkt_p),
        tail_threshold: DEFAULT_TAIL_THRESHOLD,
        bounds,
    })
}

impl CdfDiagnostic {
    /// `rank,token_id,standard_probability,standard_cumulative,bucketized_probability,bucketized_cumulative`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,standard_token,standard_probability,standard_cumulative,bucketized_token,bucketized_probability,bucketized_cumulative\n");
        for (i, (s, b)) in self.standard.iter().zip(&self.bucketized).enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                s.token_id, s.probability, s.cumulative, b.token_id, b.probability, b.cumulative
            ));
        }
        out
    }
}
