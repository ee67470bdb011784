//! Exact enumeration of output distributions and the worst-case
//! probability ratio between any two inputs.

use serde::Serialize;

use super::{bucketize, standard_em_log_probabilities, BucketSet};
use crate::error::{CapeError, Result};
use crate::par::Execution;
use crate::rng::{below, derive_stream, unit_f64};

/// Which selection rule to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SelectionMechanism {
    Bucketized { n_buckets: usize },
    Standard,
}

/// How the bucketized mechanism's sensitivity is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SensitivityScope {
    /// One sensitivity shared by every origin: the largest per-origin gap.
    #[default]
    Global,
    /// Each origin uses its own bucket-mean gap, as the online mechanism does.
    PerOrigin,
}

/// `scores[t][y]` is the utility of candidate `y` when the input is `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityFamily {
    pub scores: Vec<Vec<f64>>,
}

impl UtilityFamily {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let n = scores.first().map(Vec::len).unwrap_or(0);
        if scores.len() < 2 || n == 0 {
            return Err(CapeError::InvalidParameter(
                "a utility family needs at least two origins and one candidate".into(),
            ));
        }
        for (row, s) in scores.iter().enumerate() {
            if s.len() != n {
                return Err(CapeError::SizeMismatch { what: "utility family row", expected: n, actual: s.len() });
            }
            if let Some(column) = s.iter().position(|u| !u.is_finite()) {
                return Err(CapeError::NonFinite { row, column, value: s[column] });
            }
        }
        Ok(Self { scores })
    }

    pub fn origins(&self) -> usize {
        self.scores.len()
    }

    pub fn candidates(&self) -> usize {
        self.scores[0].len()
    }

    /// Independent uniform utilities in `[0, 1)`.
    pub fn random(origins: usize, candidates: usize, seed: u64) -> Self {
        let scores = (0..origins)
            .map(|t| {
                let mut rng = derive_stream(seed, "family-random", &[t as u64]);
                (0..candidates).map(|_| unit_f64(&mut rng)).collect()
            })
            .collect();
        Self { scores }
    }

    /// Every origin shares the same utility vector.
    pub fn identical(origins: usize, candidates: usize, seed: u64) -> Self {
        let row = Self::random(1, candidates, seed).scores.remove(0);
        Self { scores: vec![row; origins] }
    }

    /// Each origin has one high-utility token and the rest clustered near
    /// zero, giving a singleton top bucket next to a crowded bottom one.
    pub fn skewed_within(origins: usize, candidates: usize, seed: u64) -> Self {
        let scores = (0..origins)
            .map(|t| {
                let mut rng = derive_stream(seed, "family-skew", &[t as u64]);
                let top = below(&mut rng, candidates);
                (0..candidates).map(|y| if y == top { 1.0 } else { 0.02 * unit_f64(&mut rng) }).collect()
            })
            .collect();
        Self { scores }
    }

    /// Two origins whose bucket structures differ sharply around one
    /// candidate (index 0): under the first it is the lone member of the top
    /// bucket, under the second it shares the bottom bucket with most of the
    /// vocabulary while a sparse spread occupies the upper buckets.
    pub fn skewed_across(candidates: usize, spread: usize) -> Self {
        assert!(candidates > spread + 1);
        let mut lone = vec![0.0; candidates];
        lone[0] = 1.0;
        for (i, u) in lone.iter_mut().enumerate().skip(1) {
            *u = 1e-3 * i as f64 / candidates as f64;
        }
        let mut crowded = vec![0.0; candidates];
        let first = candidates - spread;
        for (j, u) in crowded.iter_mut().enumerate().skip(first) {
            let k = (j - first) as f64;
            *u = 0.03 + (1.0 - 0.03) * k / (spread - 1).max(1) as f64;
        }
        Self { scores: vec![crowded, lone] }
    }
}

/// Outcome of an exhaustive ratio check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpCheckReport {
    pub epsilon: f64,
    pub mechanism: SelectionMechanism,
    pub scope: SensitivityScope,
    /// Largest `P[R(t)=y] / P[R(t')=y]` over all `t, t', y`.
    pub max_ratio: f64,
    pub max_log_ratio: f64,
    /// Argmax `(t, t', y)` of the ratio.
    pub worst: (usize, usize, usize),
    /// `exp(eps + max eps')` with eps' taken per origin.
    pub bound: f64,
    /// Pairs whose ratio exceeds `exp(eps + ln(max |b| / min |b|))`, with
    /// cardinalities pooled over both origins' bucket sets.
    pub pairwise_violations: usize,
    /// Largest ratio divided by its pairwise bound.
    pub worst_pairwise_slack: f64,
    /// True when some ratio exceeds what the per-origin eps' of either
    /// input would account for.
    pub per_origin_undercount: bool,
    pub max_epsilon_prime: f64,
    pub sensitivity: f64,
}

impl DpCheckReport {
    /// The ratio fits within `exp(eps + max eps')` up to `1e-9` relative slack.
    pub fn passes_global(&self) -> bool {
        self.max_log_ratio <= self.bound.ln() + 1e-9_f64.ln_1p()
    }

    /// Every pair respects its own pooled-cardinality bound.
    pub fn passes_pairwise(&self) -> bool {
        self.pairwise_violations == 0
    }

    pub fn passes(&self) -> bool {
        self.passes_global() && self.passes_pairwise()
    }
}

struct OriginDistribution {
    log_p: Vec<f64>,
    max_card: usize,
    min_card: usize,
    epsilon_prime: f64,
}

/// Plain exponential-mechanism sensitivity `max_y (max_t u - min_t u)`.
pub fn family_sensitivity(family: &UtilityFamily) -> f64 {
    (0..family.candidates())
        .map(|y| {
            let (lo, hi) = family
                .scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[y]), hi.max(s[y])));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Enumerates `P[R(t) = y]` for every origin and candidate and compares all
/// ordered pairs of origins.
pub fn dp_ratio_check(
    family: &UtilityFamily,
    epsilon: f64,
    mechanism: SelectionMechanism,
    scope: SensitivityScope,
    exec: Execution,
) -> Result<DpCheckReport> {
    let (dists, sensitivity) = match mechanism {
        SelectionMechanism::Standard => {
            let delta = family_sensitivity(family);
            let dists = exec.try_map_range(family.origins(), |t| {
                let log_p = if delta > 0.0 {
                    standard_em_log_probabilities(&family.scores[t], epsilon, delta)?
                } else {
                    vec![-(family.candidates() as f64).ln(); family.candidates()]
                };
                Ok::<_, CapeError>(OriginDistribution { log_p, max_card: 1, min_card: 1, epsilon_prime: 0.0 })
            })?;
            (dists, delta)
        }
        SelectionMechanism::Bucketized { n_buckets } => {
            if n_buckets == 0 {
                return Err(CapeError::InvalidParameter("n_buckets must be at least 1".into()));
            }
            let sets: Vec<BucketSet> = exec.map_range(family.origins(), |t| bucketize(&family.scores[t], n_buckets));
            let global = sets.iter().map(|s| s.sensitivity).fold(0.0, f64::max);
            let dists = exec.try_map_range(sets.len(), |t| {
                let set = &sets[t];
                let delta = match scope {
                    SensitivityScope::Global => global,
                    SensitivityScope::PerOrigin => set.sensitivity,
                };
                Ok::<_, CapeError>(OriginDistribution {
                    log_p: set.token_log_probabilities_with(epsilon, delta)?,
                    max_card: set.max_cardinality(),
                    min_card: set.min_cardinality(),
                    epsilon_prime: set.epsilon_prime,
                })
            })?;
            (dists, global)
        }
    };

    for (t, d) in dists.iter().enumerate() {
        if let Some(y) = d.log_p.iter().position(|lp| !lp.is_finite()) {
            return Err(CapeError::InvalidParameter(format!(
                "candidate {y} has zero probability under origin {t}; full support is required"
            )));
        }
    }

    let max_epsilon_prime = dists.iter().map(|d| d.epsilon_prime).fold(0.0, f64::max);
    let tol = 1e-9_f64.ln_1p();

    struct PairStats {
        log_ratio: f64,
        worst: (usize, usize, usize),
        violations: usize,
        slack: f64,
        undercount: bool,
    }

    let per_t = exec.map_range(dists.len(), |t| {
        let a = &dists[t];
        let mut s = PairStats {
            log_ratio: f64::NEG_INFINITY,
            worst: (t, t, 0),
            violations: 0,
            slack: f64::NEG_INFINITY,
            undercount: false,
        };
        for (t2, b) in dists.iter().enumerate() {
            let (mut best, mut y_best) = (f64::NEG_INFINITY, 0);
            for (y, (x, z)) in a.log_p.iter().zip(&b.log_p).enumerate() {
                let r = x - z;
                if r > best {
                    best = r;
                    y_best = y;
                }
            }
            if best > s.log_ratio {
                s.log_ratio = best;
                s.worst = (t, t2, y_best);
            }
            let pooled = (a.max_card.max(b.max_card) as f64 / a.min_card.min(b.min_card) as f64).ln();
            let pair_bound = epsilon + pooled;
            if best > pair_bound + tol {
                s.violations += 1;
            }
            s.slack = s.slack.max(best - pair_bound);
            if best > epsilon + a.epsilon_prime.max(b.epsilon_prime) + tol {
                s.undercount = true;
            }
        }
        s
    });

    let mut report = DpCheckReport {
        epsilon,
        mechanism,
        scope,
        max_ratio: 0.0,
        max_log_ratio: f64::NEG_INFINITY,
        worst: (0, 0, 0),
        bound: (epsilon + max_epsilon_prime).exp(),
        pairwise_violations: 0,
        worst_pairwise_slack: 0.0,
        per_origin_undercount: false,
        max_epsilon_prime,
        sensitivity,
    };
    let mut slack = f64::NEG_INFINITY;
    for s in per_t {
        if s.log_ratio > report.max_log_ratio {
            report.max_log_ratio = s.log_ratio;
            report.worst = s.worst;
        }
        report.pairwise_violations += s.violations;
        report.per_origin_undercount |= s.undercount;
        slack = slack.max(s.slack);
    }
    report.max_ratio = report.max_log_ratio.exp();
    report.worst_pairwise_slack = slack.exp();
    Ok(report)
}
