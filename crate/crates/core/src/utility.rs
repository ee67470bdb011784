//! Hybrid utility: clipped contextual logits combined with exponentiated,
//! min-max normalized embedding distance,
//!
//! ```text
//! u(t, r) = clip(L_r, 0, B)^lambda_L * exp(-(d(t, r) - d_min) / (d_max - d_min))^lambda_D
//! ```
//!
//! Scores are bounded by `B^lambda_L`, nondecreasing in the logit and
//! nonincreasing in the raw distance.

use serde::{Deserialize, Serialize};

use crate::error::{CapeError, Result};
use crate::vocab::{DistanceRow, TokenId};

/// Model logits for every vocabulary token at one context.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub values: Vec<f64>,
    /// Opaque label of the context that produced the logits.
    pub context_id: String,
}

impl LogitVector {
    pub fn new(values: Vec<f64>, context_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CapeError::NonFinite { row: 0, column: i, value: values[i] });
        }
        Ok(LogitVector { values, context_id: context_id.into() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest logit; ties go to the lowest id.
    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| TokenId::from_index(i))
    }
}

/// Upper clip edge for logits. Always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ClipBound(f64);

impl ClipBound {
    pub fn new(bound: f64) -> Result<Self> {
        if bound > 0.0 && bound.is_finite() {
            Ok(ClipBound(bound))
        } else {
            Err(CapeError::InvalidParameter(format!("clip bound must be positive and finite, got {bound}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ClipBound {
    type Error = CapeError;

    fn try_from(v: f64) -> Result<Self> {
        ClipBound::new(v)
    }
}

impl From<ClipBound> for f64 {
    fn from(b: ClipBound) -> f64 {
        b.0
    }
}

/// Importance exponents for the logit and distance factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    pub lambda_l: f64,
    pub lambda_d: f64,
}

impl Default for UtilityParams {
    fn default() -> Self {
        UtilityParams { lambda_l: 0.5, lambda_d: 1.0 }
    }
}

impl UtilityParams {
    pub fn new(lambda_l: f64, lambda_d: f64) -> Result<Self> {
        let p = UtilityParams { lambda_l, lambda_d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l", self.lambda_l), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CapeError::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_l == 0.0 && self.lambda_d == 0.0 {
            return Err(CapeError::InvalidParameter("lambda_l and lambda_d cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Per-candidate utility scores for one origin token in one context.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector {
    pub origin: TokenId,
    pub scores: Vec<f64>,
    pub params: UtilityParams,
    pub bound: ClipBound,
}

impl UtilityVector {
    /// Largest attainable score, `B^lambda_L`.
    pub fn upper_bound(&self) -> f64 {
        pow0(self.bound.get(), self.params.lambda_l)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `base^exp` with `0^0 = 1`.
#[inline]
fn pow0(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else {
        base.powf(exp)
    }
}

/// `exp(-(d - d_min) / (d_max - d_min))` per entry, in `[e^-1, 1]`.
/// A row with `d_max == d_min` maps to all ones.
pub fn normalize_distances(raw: &DistanceRow) -> Vec<f64> {
    let (lo, hi) = raw.distances.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![1.0; raw.distances.len()];
    }
    raw.distances.iter().map(|&d| (-((d - lo) / span)).exp()).collect()
}

/// Clamps each logit into `[0, B]`.
pub fn clip_logits(raw: &LogitVector, bound: ClipBound) -> Vec<f64> {
    raw.values.iter().map(|&v| v.clamp(0.0, bound.get())).collect()
}

/// Largest positive logit across all samples.
pub fn calibrate_bound(samples: &[LogitVector]) -> Result<ClipBound> {
    if samples.is_empty() {
        return Err(CapeError::Calibration("no calibration samples".into()));
    }
    let max =
        samples.iter().flat_map(|s| s.values.iter().copied()).filter(|v| *v > 0.0).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CapeError::Calibration("no positive logit in any calibration sample".into()));
    }
    ClipBound::new(max)
}

pub fn hybrid_utility(
    logits: &LogitVector,
    distances: &DistanceRow,
    params: UtilityParams,
    bound: ClipBound,
) -> Result<UtilityVector> {
    params.validate()?;
    if logits.len() != distances.distances.len() {
        return Err(CapeError::SizeMismatch {
            what: "logit vector",
            expected: distances.distances.len(),
            actual: logits.len(),
        });
    }
    let clipped = clip_logits(logits, bound);
    let dist = normalize_distances(distances);
    let scores =
        clipped.iter().zip(&dist).map(|(&l, &d)| pow0(l, params.lambda_l) * pow0(d, params.lambda_d)).collect();
    Ok(UtilityVector { origin: distances.origin, scores, params, bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(d: &[f64]) -> DistanceRow {
        DistanceRow { origin: TokenId(0), distances: d.to_vec() }
    }

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec(), "t").unwrap()
    }

    #[test]
    fn normalize_three_points() {
        let out = normalize_distances(&row(&[0.0, 1.0, 2.0]));
        assert_eq!(out[0], 1.0);
        assert!((out[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((out[1] - 0.6065).abs() < 1e-4);
        assert!((out[2] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn normalize_degenerate_row() {
        assert_eq!(normalize_distances(&row(&[2.0, 2.0, 2.0])), vec![1.0; 3]);
    }

    #[test]
    fn clip_semantics() {
        let b = ClipBound::new(10.0).unwrap();
        assert_eq!(clip_logits(&logits(&[-3.0, 0.5, 99.0]), b), vec![0.0, 0.5, 10.0]);
        assert_eq!(clip_logits(&logits(&[0.0, 3.0, 10.0]), b), vec![0.0, 3.0, 10.0]);
    }

    #[test]
    fn calibration_takes_positive_max() {
        let b = calibrate_bound(&[logits(&[1.0, 2.0]), logits(&[0.5, 3.5])]).unwrap();
        assert_eq!(b.get(), 3.5);
        assert!(matches!(calibrate_bound(&[logits(&[-1.0, -2.0])]), Err(CapeError::Calibration(_))));
        assert!(calibrate_bound(&[]).is_err());
    }

    #[test]
    fn clip_bound_rejects_nonpositive() {
        assert!(ClipBound::new(0.0).is_err());
        assert!(ClipBound::new(-1.0).is_err());
        assert!(ClipBound::new(f64::INFINITY).is_err());
        assert!(serde_json::from_str::<ClipBound>("-2.0").is_err());
    }

    #[test]
    fn params_validation() {
        assert!(UtilityParams::new(0.0, 0.0).is_err());
        assert!(UtilityParams::new(-0.1, 1.0).is_err());
        assert!(UtilityParams::new(0.0, 1.0).is_ok());
        assert_eq!(UtilityParams::default(), UtilityParams::new(0.5, 1.0).unwrap());
    }

    #[test]
    fn lambda_l_zero_gives_normalized_distance() {
        let d = row(&[0.0, 0.7, 3.0, 1.2]);
        let u = hybrid_utility(
            &logits(&[-5.0, 0.0, 4.0, 100.0]),
            &d,
            UtilityParams::new(0.0, 1.0).unwrap(),
            ClipBound::new(10.0).unwrap(),
        )
        .unwrap();
        assert_eq!(u.scores, normalize_distances(&d));
    }

    #[test]
    fn direct_evaluation() {
        // logit 4 (within bound), normalized distance e^-1 (the farthest token)
        let u = hybrid_utility(
            &logits(&[0.0, 4.0]),
            &row(&[0.0, 5.0]),
            UtilityParams::default(),
            ClipBound::new(10.0).unwrap(),
        )
        .unwrap();
        let expected = 2.0 * (-1.0f64).exp();
        assert!((u.scores[1] - expected).abs() < 1e-15);
        assert!((u.scores[1] - 0.7358).abs() < 1e-4);
        assert_eq!(u.scores[0], 0.0);
    }

    #[test]
    fn length_mismatch() {
        let r =
            hybrid_utility(&logits(&[1.0]), &row(&[0.0, 1.0]), UtilityParams::default(), ClipBound::new(1.0).unwrap());
        assert!(matches!(r, Err(CapeError::SizeMismatch { .. })));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(logits(&[1.0, 3.0, 3.0]).argmax(), Some(TokenId(1)));
        assert_eq!(LogitVector::new(vec![], "e").unwrap().argmax(), None);
        assert!(LogitVector::new(vec![f64::NAN], "n").is_err());
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64, f64)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(0.0f64..10.0, n),
                0.0f64..2.0,
                0.0f64..2.0,
                0.1f64..15.0,
            )
        })
    }

    proptest! {
        #[test]
        fn normalized_range(d in prop::collection::vec(0.0f64..50.0, 2..60)) {
            let out = normalize_distances(&row(&d));
            let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(hi, 1.0);
            let distinct = d.iter().any(|&x| x != d[0]);
            if distinct {
                prop_assert!((lo - (-1.0f64).exp()).abs() < 1e-15);
            }
        }

        #[test]
        fn bounded_and_monotone((l, d, ll, ld, b) in case()) {
            prop_assume!(ll > 0.0 || ld > 0.0);
            let params = UtilityParams::new(ll, ld).unwrap();
            let bound = ClipBound::new(b).unwrap();
            let u = hybrid_utility(&logits(&l), &row(&d), params, bound).unwrap();
            let cap = u.upper_bound();
            for &s in &u.scores {
                prop_assert!(s.is_finite() && s >= 0.0 && s <= cap * (1.0 + 1e-12));
            }
            // raising one logit never lowers its score
            let mut l2 = l.clone();
            l2[0] += 3.0;
            let u2 = hybrid_utility(&logits(&l2), &row(&d), params, bound).unwrap();
            prop_assert!(u2.scores[0] >= u.scores[0]);
            // pushing a non-extremal token farther away never raises its score
            let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            for j in 0..d.len() {
                if d[j] > lo && d[j] < hi {
                    let mut d2 = d.clone();
                    d2[j] = (d[j] + 0.5).min(hi);
                    let u3 = hybrid_utility(&logits(&l), &row(&d2), params, bound).unwrap();
                    prop_assert!(u3.scores[j] <= u.scores[j] + 1e-15);
                }
            }
        }

        #[test]
        fn exponent_zero_identities((l, d, _ll, _ld, b) in case()) {
            let bound = ClipBound::new(b).unwrap();
            let only_d = UtilityParams::new(0.0, 1.0).unwrap();
            let shifted: Vec<f64> = l.iter().map(|v| v * 2.0 + 1.0).collect();
            let a = hybrid_utility(&logits(&l), &row(&d), only_d, bound).unwrap();
            let c = hybrid_utility(&logits(&shifted), &row(&d), only_d, bound).unwrap();
            prop_assert_eq!(a.scores, c.scores);

            let only_l = UtilityParams::new(0.7, 0.0).unwrap();
            let d2: Vec<f64> = d.iter().rev().copied().collect();
            let a = hybrid_utility(&logits(&l), &row(&d), only_l, bound).unwrap();
            let c = hybrid_utility(&logits(&l), &row(&d2), only_l, bound).unwrap();
            prop_assert_eq!(a.scores, c.scores);
        }
    }
}
