//! Empirical attacks on perturbed prompts.
//!
//! Both attacks look only at the perturbed tokens; the originals are read
//! solely to score success. Positions kept as non-sensitive are not
//! attacked and do not count toward the success rate.

use serde::Serialize;

use crate::error::{CapeError, Result};
use crate::mechanism::PerturbedPrompt;
use crate::metrics::rouge_l_f1;
use crate::par::Execution;
use crate::providers::{ContextMode, ContextWindow, LogitProvider};
use crate::vocab::{DistanceCache, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Knn,
    Mti,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionOutcome {
    pub prompt_id: u64,
    pub position: usize,
    pub original: TokenId,
    pub replacement: TokenId,
    /// KNN: number of tokens strictly closer to the replacement than the
    /// original. MTI: the attacker's predicted token id.
    pub score: u64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBreakdown {
    pub prompt_id: u64,
    pub n_sensitive: usize,
    pub successes: usize,
    /// MTI only: Rouge-L F1 of the reconstruction against the original.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack_kind: AttackKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub n_sensitive: usize,
    pub successes: usize,
    pub asr: f64,
    pub privacy_score: f64,
    /// MTI only: mean per-prompt Rouge-L F1 of reconstructions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_f1: Option<f64>,
    pub per_prompt: Vec<PromptBreakdown>,
    #[serde(skip)]
    pub positions: Vec<PositionOutcome>,
}

impl AttackReport {
    fn build(
        attack_kind: AttackKind,
        k: Option<usize>,
        per_prompt: Vec<PromptBreakdown>,
        positions: Vec<PositionOutcome>,
    ) -> Self {
        let n_sensitive: usize = per_prompt.iter().map(|p| p.n_sensitive).sum();
        let successes: usize = per_prompt.iter().map(|p| p.successes).sum();
        let asr = if n_sensitive == 0 { 0.0 } else { successes as f64 / n_sensitive as f64 };
        let f1: Vec<f64> = per_prompt.iter().filter_map(|p| p.rouge_l_f1).collect();
        let rouge_l_f1 =
            (attack_kind == AttackKind::Mti && !f1.is_empty()).then(|| f1.iter().sum::<f64>() / f1.len() as f64);
        Self {
            attack_kind,
            k,
            n_sensitive,
            successes,
            asr,
            privacy_score: 1.0 - asr,
            rouge_l_f1,
            per_prompt,
            positions,
        }
    }

    /// `prompt_id,position,original,replacement,score,success`
    pub fn positions_csv(&self) -> String {
        let mut out = String::from("prompt_id,position,original,replacement,score,success\n");
        for p in &self.positions {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.prompt_id, p.position, p.original, p.replacement, p.score, p.success
            ));
        }
        out
    }
}

fn attacked(prompt: &PerturbedPrompt) -> impl Iterator<Item = (usize, TokenId, TokenId)> + '_ {
    prompt.records.iter().filter(|r| !r.skipped).map(|r| (r.position, r.original_id, r.replacement_id))
}

fn check_ids(prompts: &[PerturbedPrompt], vocab_size: usize) -> Result<()> {
    for p in prompts {
        for id in p.original_ids.iter().chain(&p.perturbed_ids) {
            if id.index() >= vocab_size {
                return Err(CapeError::TokenOutOfRange { id: id.index(), size: vocab_size });
            }
        }
    }
    Ok(())
}

/// Count of tokens strictly closer to `replacement` than `original` is.
/// The original is among the `k` nearest (ties at the k-th distance
/// included) exactly when this is below `k`.
pub fn knn_rank(distances: &DistanceCache, replacement: TokenId, original: TokenId) -> Result<usize> {
    let row = distances.get(replacement)?;
    let d = row.distances[original.index()];
    Ok(row.distances.iter().filter(|&&x| x < d).count())
}

/// KNN reports for several `k` from a single pass over the artifact.
pub fn knn_attack_multi(
    prompts: &[PerturbedPrompt],
    distances: &DistanceCache,
    ks: &[usize],
    exec: Execution,
) -> Result<Vec<AttackReport>> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(CapeError::InvalidParameter(format!("k must be at least 1, got {k}")));
    }
    check_ids(prompts, distances.table().rows())?;
    let ranks: Vec<Vec<(usize, TokenId, TokenId, usize)>> = exec.try_map_slice(prompts, |p| {
        attacked(p)
            .map(|(pos, o, r)| knn_rank(distances, r, o).map(|rank| (pos, o, r, rank)))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ks
        .iter()
        .map(|&k| {
            let mut per_prompt = Vec::with_capacity(prompts.len());
            let mut positions = Vec::new();
            for (p, rows) in prompts.iter().zip(&ranks) {
                let mut successes = 0;
                for &(position, original, replacement, rank) in rows {
                    let success = rank < k;
                    successes += success as usize;
                    positions.push(PositionOutcome {
                        prompt_id: p.prompt_id,
                        position,
                        original,
                        replacement,
                        score: rank as u64,
                        success,
                    });
                }
                per_prompt.push(PromptBreakdown {
                    prompt_id: p.prompt_id,
                    n_sensitive: rows.len(),
                    successes,
                    rouge_l_f1: None,
                });
            }
            AttackReport::build(AttackKind::Knn, Some(k), per_prompt, positions)
        })
        .collect())
}

pub fn knn_attack(
    prompts: &[PerturbedPrompt],
    distances: &DistanceCache,
    k: usize,
    exec: Execution,
) -> Result<AttackReport> {
    Ok(knn_attack_multi(prompts, distances, &[k], exec)?.remove(0))
}

/// Masks each attacked position of the perturbed prompt in turn and takes
/// the attacker's argmax as the guess for the original token.
pub fn mti_attack(
    prompts: &[PerturbedPrompt],
    attacker: &dyn LogitProvider,
    vocab: &Vocabulary,
    exec: Execution,
) -> Result<AttackReport> {
    let desc = attacker.descriptor();
    if desc.mode != ContextMode::Bidirectional {
        return Err(CapeError::InvalidParameter("masked-token inference needs a bidirectional attacker".into()));
    }
    desc.check_binding(vocab)?;
    check_ids(prompts, vocab.len())?;
    let per: Vec<(PromptBreakdown, Vec<PositionOutcome>)> = exec.try_map_slice(prompts, |p| {
        let mut reconstruction = p.perturbed_ids.clone();
        let mut outcomes = Vec::new();
        for (position, original, replacement) in attacked(p) {
            let window = ContextWindow::new(&p.perturbed_ids, position, ContextMode::Bidirectional)?;
            let logits = attacker.context_logits(&window).map_err(|e| CapeError::AtPrompt {
                prompt_id: p.prompt_id,
                source: Box::new(CapeError::AtPosition { position, source: Box::new(e) }),
            })?;
            let guess = logits.argmax().ok_or_else(|| CapeError::Provider("attacker returned empty logits".into()))?;
            reconstruction[position] = guess;
            outcomes.push(PositionOutcome {
                prompt_id: p.prompt_id,
                position,
                original,
                replacement,
                score: guess.0 as u64,
                success: guess == original,
            });
        }
        let breakdown = PromptBreakdown {
            prompt_id: p.prompt_id,
            n_sensitive: outcomes.len(),
            successes: outcomes.iter().filter(|o| o.success).count(),
            rouge_l_f1: Some(rouge_l_f1(&p.original_ids, &reconstruction)),
        };
        Ok::<_, CapeError>((breakdown, outcomes))
    })?;
    let (per_prompt, positions): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(AttackReport::build(AttackKind::Mti, None, per_prompt, positions.into_iter().flatten().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_has_zero_asr() {
        let r = AttackReport::build(AttackKind::Knn, Some(3), vec![], vec![]);
        assert_eq!(r.asr, 0.0);
        assert_eq!(r.privacy_score, 1.0);
        assert!(r.rouge_l_f1.is_none());
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["attack_kind"], "knn");
        assert!(j.get("positions").is_none());
    }
}
