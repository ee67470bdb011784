mod common;

use std::sync::Arc;

use cape_core::attacks::{knn_attack, knn_attack_multi, mti_attack, AttackKind};
use cape_core::mechanism::{Mechanism, PerturbedPrompt};
use cape_core::metrics::{cdf_diagnostic, distinct_count_moments, mapping_stats, rouge_l_f1};
use cape_core::providers::{ClosureProvider, ContextMode, ContextWindow, LogitProvider};
use cape_core::utility::UtilityParams;
use cape_core::vocab::{DistanceCache, EmbeddingTable, TokenId};
use cape_core::Execution;
use common::{fixed_config, load_toy, synthetic, toy, toy_prompts};

fn perturbed_corpus(n_prompts: usize, eps: f64) -> (common::Fixture<ClosureProvider>, Vec<PerturbedPrompt>) {
    let f = synthetic(200, 21, ContextMode::Bidirectional);
    let mech = Mechanism::new(fixed_config(eps, 2, 8.0), f.ctx(), Execution::Parallel).unwrap();
    let prompts = (0..n_prompts)
        .map(|i| {
            let ids: Vec<TokenId> = (0..12).map(|j| TokenId(((i * 37 + j * 11) % 200) as u32)).collect();
            mech.perturb_prompt(i as u64, &ids).unwrap()
        })
        .collect();
    (f, prompts)
}

fn handmade(orig: &[u32], repl: &[u32]) -> PerturbedPrompt {
    let f = synthetic(5, 1, ContextMode::Bidirectional);
    let mech = Mechanism::new(fixed_config(1.0, 0, 1.0), f.ctx(), Execution::Sequential).unwrap();
    let mut p = mech.perturb_prompt(0, &orig.iter().map(|&i| TokenId(i)).collect::<Vec<_>>()).unwrap();
    for (r, &x) in p.records.iter_mut().zip(repl) {
        r.replacement_id = TokenId(x);
    }
    p.perturbed_ids = repl.iter().map(|&i| TokenId(i)).collect();
    p
}

#[test]
fn knn_self_replacement_always_succeeds() {
    let table = Arc::new(common::random_table(5, 3, 4));
    let cache = DistanceCache::new(table);
    let p = handmade(&[0, 1, 2], &[0, 1, 2]);
    for k in 1..5 {
        let r = knn_attack(std::slice::from_ref(&p), &cache, k, Execution::Sequential).unwrap();
        assert_eq!(r.asr, 1.0);
        assert_eq!(r.privacy_score, 0.0);
    }
}

#[test]
fn knn_farthest_token_fails_at_k1() {
    let table = Arc::new(EmbeddingTable::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![10.0]]).unwrap());
    let cache = DistanceCache::new(table);
    let p = handmade(&[0], &[4]);
    let r = knn_attack(std::slice::from_ref(&p), &cache, 1, Execution::Sequential).unwrap();
    assert_eq!((r.n_sensitive, r.successes), (1, 0));
    assert_eq!(knn_attack(&[p], &cache, 5, Execution::Sequential).unwrap().successes, 1);
}

#[test]
fn knn_ties_at_kth_distance_are_included() {
    // from token 0, tokens 1 and 2 are both at distance 1
    let table = Arc::new(EmbeddingTable::from_rows(&[vec![0.0], vec![1.0], vec![-1.0], vec![5.0], vec![6.0]]).unwrap());
    let cache = DistanceCache::new(table);
    for orig in [1, 2] {
        let p = handmade(&[orig], &[0]);
        assert_eq!(knn_attack(&[p], &cache, 2, Execution::Sequential).unwrap().successes, 1);
    }
}

#[test]
fn knn_is_monotone_in_k() {
    let (f, prompts) = perturbed_corpus(30, 1.0);
    let ks: Vec<usize> = (1..200).step_by(7).chain([200]).collect();
    let reports = knn_attack_multi(&prompts, &f.distances, &ks, Execution::Parallel).unwrap();
    for w in reports.windows(2) {
        assert!(w[1].asr >= w[0].asr);
    }
    assert!(reports.iter().all(|r| r.attack_kind == AttackKind::Knn && r.privacy_score == 1.0 - r.asr));
    assert_eq!(reports.last().unwrap().asr, 1.0);
    assert!(knn_attack(&prompts, &f.distances, 0, Execution::Parallel).is_err());
}

#[test]
fn mti_oracle_attacker_recovers_everything() {
    let (f, prompts) = perturbed_corpus(5, 2.0);
    let originals: std::collections::HashMap<Vec<TokenId>, Vec<TokenId>> =
        prompts.iter().map(|p| (p.perturbed_ids.clone(), p.original_ids.clone())).collect();
    let attacker = ClosureProvider::new(f.vocab.clone(), f.table.clone(), ContextMode::Bidirectional, move |w| {
        let orig = &originals[w.token_ids];
        let mut v = vec![0.0; 200];
        v[orig[w.target_position].index()] = 50.0;
        v
    })
    .unwrap();
    let r = mti_attack(&prompts, &attacker, &f.vocab, Execution::Parallel).unwrap();
    assert_eq!(r.asr, 1.0);
    assert_eq!(r.privacy_score, 0.0);
    assert_eq!(r.rouge_l_f1, Some(1.0));
}

#[test]
fn mti_uniform_attacker_is_at_chance() {
    let (f, prompts) = perturbed_corpus(60, 1.0);
    // constant logits: argmax picks id 0 everywhere, so success only where
    // the original is token 0
    let attacker =
        ClosureProvider::new(f.vocab.clone(), f.table.clone(), ContextMode::Bidirectional, |_| vec![1.0; 200]).unwrap();
    let r = mti_attack(&prompts, &attacker, &f.vocab, Execution::Parallel).unwrap();
    let zeros =
        prompts.iter().flat_map(|p| p.records.iter()).filter(|r| !r.skipped && r.original_id == TokenId(0)).count();
    assert_eq!(r.successes, zeros);
    assert!(r.asr < 0.02);
}

#[test]
fn mti_matches_positionwise_argmax_oracle() {
    let f = load_toy();
    let mech = Mechanism::new(fixed_config(14.0, 5, 10.0), f.ctx(), Execution::Parallel).unwrap();
    let prompts: Vec<PerturbedPrompt> =
        toy_prompts(&f).iter().enumerate().map(|(i, p)| mech.perturb_prompt(i as u64, p).unwrap()).collect();
    let attacker = synthetic(f.vocab.len(), 3, ContextMode::Bidirectional);
    let attacker = ClosureProvider::new(f.vocab.clone(), f.table.clone(), ContextMode::Bidirectional, move |w| {
        attacker.provider.context_logits(w).unwrap().values
    })
    .unwrap();
    let report = mti_attack(&prompts, &attacker, &f.vocab, Execution::Parallel).unwrap();
    let (mut n, mut hits, mut f1) = (0, 0, 0.0);
    for p in &prompts {
        let mut recon = p.perturbed_ids.clone();
        for r in p.records.iter().filter(|r| !r.skipped) {
            let w = ContextWindow::new(&p.perturbed_ids, r.position, ContextMode::Bidirectional).unwrap();
            let v = attacker.context_logits(&w).unwrap().values;
            let mut best = 0;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            recon[r.position] = TokenId(best as u32);
            n += 1;
            hits += (best == r.original_id.index()) as usize;
        }
        f1 += rouge_l_f1(&p.original_ids, &recon);
    }
    assert_eq!(report.n_sensitive, n);
    assert_eq!(report.successes, hits);
    assert!((report.rouge_l_f1.unwrap() - f1 / prompts.len() as f64).abs() < 1e-15);
    assert_eq!(report.positions_csv().lines().count(), n + 1);
}

#[test]
fn mti_rejects_causal_attacker() {
    let (f, prompts) = perturbed_corpus(1, 1.0);
    let causal = synthetic(200, 21, ContextMode::Causal);
    assert!(mti_attack(&prompts, &causal.provider, &f.vocab, Execution::Sequential).is_err());
}

#[test]
fn no_sensitive_positions_gives_zero_asr() {
    let f = load_toy();
    let mech = Mechanism::new(fixed_config(1.0, 1, 10.0), f.ctx(), Execution::Sequential).unwrap();
    let p = mech.perturb_prompt(0, &f.ids("it is very .")).unwrap();
    let r = knn_attack(&[p], &f.distances, 10, Execution::Sequential).unwrap();
    assert_eq!((r.n_sensitive, r.asr, r.privacy_score), (0, 0.0, 1.0));
}

#[test]
fn mapping_single_trial_and_retention_limit() {
    let f = synthetic(50, 9, ContextMode::Bidirectional);
    let mech = Mechanism::new(fixed_config(1.0, 1, 6.0), f.ctx(), Execution::Parallel).unwrap();
    let ctx = [TokenId(1), TokenId(2), TokenId(3)];
    let one = mapping_stats(&mech, &ctx, 1, 1).unwrap();
    assert_eq!((one.distinct_outputs, one.trials), (1, 1));

    let mut cfg = fixed_config(1e6, 1, 6.0);
    cfg.params = UtilityParams::new(0.0, 1.0).unwrap();
    cfg.n_buckets = 50;
    let limit = Mechanism::new(cfg, f.ctx(), Execution::Parallel).unwrap();
    let s = mapping_stats(&limit, &ctx, 1, 500).unwrap();
    assert_eq!((s.retention_count, s.retention_ratio, s.distinct_outputs), (500, 1.0, 1));
}

#[test]
fn mapping_of_kept_token_is_trivial() {
    let f = load_toy();
    let mech = Mechanism::new(fixed_config(1.0, 1, 10.0), f.ctx(), Execution::Parallel).unwrap();
    let p = f.ids(toy::PROMPTS[0]);
    let s = mapping_stats(&mech, &p, 0, 100).unwrap();
    assert_eq!((s.distinct_outputs, s.retention_ratio), (1, 1.0));
}

#[test]
fn expected_distinct_count_decreases_with_epsilon() {
    let f = load_toy();
    let p = f.ids(toy::PROMPTS[0]);
    let mut last = f64::INFINITY;
    for eps in [0.1, 1.0, 3.0, 6.0, 10.0, 14.0, 30.0] {
        let mech = Mechanism::new(fixed_config(eps, 1, 10.0), f.ctx(), Execution::Sequential).unwrap();
        let probs = mech.output_distribution(&p, 2).unwrap();
        let (mean, _) = distinct_count_moments(&probs, 1000, Execution::Sequential);
        assert!(mean < last, "eps {eps}: {mean} !< {last}");
        last = mean;
    }
}

#[test]
fn distinct_count_variance_matches_brute_force() {
    // enumerate all 4^3 outcome sequences
    let p = [0.1, 0.2, 0.3, 0.4];
    let (mut m1, mut m2) = (0.0, 0.0);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                let prob = p[a] * p[b] * p[c];
                let mut s = vec![a, b, c];
                s.sort();
                s.dedup();
                m1 += prob * s.len() as f64;
                m2 += prob * (s.len() * s.len()) as f64;
            }
        }
    }
    let (mean, var) = distinct_count_moments(&p, 3, Execution::Parallel);
    assert!((mean - m1).abs() < 1e-14);
    assert!((var - (m2 - m1 * m1)).abs() < 1e-14);
}

#[test]
fn cdf_tail_mass_lower_for_bucketized() {
    let f = load_toy();
    let mech = Mechanism::new(fixed_config(6.0, 1, 10.0), f.ctx(), Execution::Sequential).unwrap();
    let p = f.ids(toy::PROMPTS[1]);
    let u = mech.utility_at(&p, 4).unwrap();
    let d = cdf_diagnostic(&u, 6.0, 50, &[10]).unwrap();
    assert!((d.standard.last().unwrap().cumulative - 1.0).abs() < 1e-12);
    assert!(d.standard.windows(2).all(|w| w[0].probability <= w[1].probability));
    assert_eq!(d.bounds[0].k, 10);
}
