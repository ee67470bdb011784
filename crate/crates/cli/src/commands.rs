use std::path::{Path, PathBuf};

use cape_core::attacks::{knn_attack, mti_attack};
use cape_core::fsutil::{write_atomic, write_json_atomic};
use cape_core::mechanism::{
    perturb_corpus, read_artifact, read_corpus, summary_path, tokenize_corpus, BoundSetting, CorpusOptions, Mechanism,
    MechanismConfig, PerturbedPrompt, TokenizedPrompt,
};
use cape_core::metrics::{cdf_diagnostic, mapping_stats, rouge_l_f1, CdfPoint, MappingStats};
use cape_core::sampler::dp_check::{dp_ratio_check, SelectionMechanism, SensitivityScope, UtilityFamily};
use cape_core::vocab::{DistanceCache, TokenId};
use cape_core::Execution;
use serde::Serialize;

use crate::args::*;
use crate::exit::CliError;
use crate::manifest::{RunClock, RunManifest};
use crate::settings::Settings;
use crate::workspace::{load_vocab, open_provider, require_provider, Workspace};

/// How the command should spread its work.
#[derive(Debug, Clone, Copy)]
pub struct Runner {
    pub exec: Execution,
    pub jobs: usize,
}

fn manifest(command: &'static str, config: Settings, run: Runner, clock: &RunClock) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config,
        provider: None,
        inputs: Vec::new(),
        outputs: Vec::new(),
        jobs: run.jobs,
        timing: clock.timing(),
        summary: serde_json::Value::Null,
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("summary serializes")
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

fn tokenized_ids(prompts: &[TokenizedPrompt]) -> Vec<Vec<TokenId>> {
    prompts.iter().filter_map(|p| p.token_ids.as_ref().ok().cloned()).collect()
}

pub fn setup(args: SetupArgs, run: Runner) -> Result<(), CliError> {
    let clock = RunClock::start();
    let mut s = Settings::resolve(&args.common, None)?;
    if args.calibration_samples.is_some() {
        s.calibration_samples = args.calibration_samples;
    }
    create_dir(&args.out_dir)?;
    let need_provider = args.calibrate_from.is_some() || s.embeddings.is_none();
    let ws = Workspace::load(&mut s, need_provider)?;

    if s.embeddings.is_none() {
        let path = args.out_dir.join("embeddings.bin");
        write_atomic(&path, &ws.table.to_binary_bytes(Some(ws.vocab.tokens())))?;
        log::info!("wrote provider embeddings to {}", path.display());
        s.embeddings = Some(path);
    }

    if args.precompute {
        let path = args.out_dir.join("distances.bin");
        let started = std::time::Instant::now();
        match DistanceCache::load(&path, ws.table.clone()) {
            Ok(cache) => log::info!("reusing distance cache {} ({} rows)", path.display(), cache.cached_rows()),
            Err(_) => {
                ws.distances.save(&path, run.exec)?;
                log::info!(
                    "wrote {} distance rows to {} in {:.2}s",
                    ws.table.rows(),
                    path.display(),
                    started.elapsed().as_secs_f64()
                );
            }
        }
        s.distances = Some(path);
    }

    if let Some(input) = &args.calibrate_from {
        let provider = ws.provider()?;
        let prompts = read_corpus(input).map_err(CliError::from_config)?;
        let ids = tokenized_ids(&tokenize_corpus(&prompts, provider, &ws.vocab, run.exec));
        let n = *s.calibration_samples.get_or_insert(match BoundSetting::default() {
            BoundSetting::Calibrate(n) => n,
            BoundSetting::Fixed(_) => 16,
        });
        let mut config = MechanismConfig::new(1.0, 0);
        config.bound = BoundSetting::Calibrate(n);
        config.mode = s.mode();
        config.nonsensitive_policy = s.nonsensitive_policy.unwrap_or_default();
        let mech = Mechanism::calibrated(config, ws.context()?, run.exec, &ids)?;
        s.clip_bound = Some(mech.bound().get());
        log::info!("calibrated clip bound {}", mech.bound().get());
    }

    for p in [&mut s.vocab, &mut s.embeddings, &mut s.distances].into_iter().flatten() {
        *p = absolute(p);
    }
    for p in [&mut s.provider, &mut s.nonsensitive].into_iter().flatten() {
        if Path::new(p.as_str()).exists() {
            *p = absolute(Path::new(p.as_str())).to_string_lossy().into_owned();
        }
    }
    let config_path = args.out_dir.join("config.json");
    write_json_atomic(&config_path, &s)?;

    let mut m = manifest("setup", s, run, &clock);
    m.provider = ws.provider.as_ref().map(|p| p.descriptor().clone());
    m.inputs.extend(args.calibrate_from.clone());
    m.outputs.push(config_path.clone());
    m.outputs.extend(m.config.distances.clone());
    m.summary = serde_json::json!({
        "vocab_size": ws.vocab.len(),
        "dim": ws.table.dim(),
        "clip_bound": m.config.clip_bound,
    });
    m.write(&config_path)?;
    println!("wrote {}", config_path.display());
    Ok(())
}

pub fn perturb(args: PerturbArgs, run: Runner) -> Result<(), CliError> {
    let clock = RunClock::start();
    let mut s = Settings::resolve(&args.common, Some(&args.mechanism))?;
    let ws = Workspace::load(&mut s, true)?;
    let config = s.mechanism_config()?;
    let provider = ws.provider()?;

    let prompts = read_corpus(&args.input).map_err(CliError::from_config)?;
    let tokenized = tokenize_corpus(&prompts, provider, &ws.vocab, run.exec);
    let mech = Mechanism::calibrated(config, ws.context()?, run.exec, &tokenized_ids(&tokenized))?;
    let options = CorpusOptions { skip_errors: args.skip_errors };
    let result = perturb_corpus(&mech, &tokenized, options).map_err(CliError::Partial)?;
    result.write(&args.output)?;

    let sum = &result.summary;
    println!(
        "perturbed {} prompts ({} failed): {} of {} positions replaced, clip bound {}, max effective epsilon {}",
        sum.n_prompts - sum.n_failed,
        sum.n_failed,
        sum.n_perturbed,
        sum.n_positions,
        mech.bound().get(),
        sum.max_effective_epsilon.map_or("-".into(), |e| format!("{e:.4}")),
    );
    let mut m = manifest("perturb", s, run, &clock);
    m.provider = Some(provider.descriptor().clone());
    m.inputs.push(args.input.clone());
    m.outputs = vec![args.output.clone(), summary_path(&args.output)];
    m.summary = serde_json::json!({ "clip_bound": mech.bound().get(), "corpus": to_value(sum) });
    m.write(&args.output)?;
    Ok(())
}

fn load_prompts(artifact: &Path) -> Result<Vec<PerturbedPrompt>, CliError> {
    let lines = read_artifact(artifact).map_err(CliError::from_config)?;
    Ok(lines
        .into_iter()
        .filter_map(|l| match l {
            cape_core::mechanism::CorpusLine::Perturbed(p) => Some(p),
            cape_core::mechanism::CorpusLine::Failed { .. } => None,
        })
        .collect())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn attack(args: AttackArgs, run: Runner) -> Result<(), CliError> {
    let clock = RunClock::start();
    let mut s = Settings::resolve(&args.common, None)?;
    let prompts = load_prompts(&args.artifact)?;
    if args.k == 0 {
        return Err(CliError::Config("--k must be at least 1".into()));
    }
    let ws = Workspace::load(&mut s, args.attack == AttackArg::Mti)?;
    let (report, name) = match args.attack {
        AttackArg::Knn => (knn_attack(&prompts, &ws.distances, args.k, run.exec)?, "knn"),
        AttackArg::Mti => (mti_attack(&prompts, ws.provider()?, &ws.vocab, run.exec)?, "mti"),
    };
    let output = args.output.clone().unwrap_or_else(|| with_suffix(&args.artifact, &format!(".{name}.json")));
    write_json_atomic(&output, &report)?;
    if let Some(csv) = &args.positions {
        write_atomic(csv, report.positions_csv().as_bytes())?;
    }
    println!(
        "{name}: {} of {} sensitive positions recovered, asr {:.4}, privacy score {:.4}",
        report.successes, report.n_sensitive, report.asr, report.privacy_score
    );
    let mut m = manifest("attack", s, run, &clock);
    m.provider = ws.provider.as_ref().map(|p| p.descriptor().clone());
    m.inputs.push(args.artifact.clone());
    m.outputs.push(output.clone());
    m.outputs.extend(args.positions.clone());
    m.summary = serde_json::json!({
        "attack": name,
        "k": report.k,
        "asr": report.asr,
        "privacy_score": report.privacy_score,
    });
    m.write(&output)?;
    Ok(())
}

#[derive(Serialize)]
struct RougeEntry {
    prompt_id: u64,
    rouge_l_f1: f64,
}

#[derive(Serialize)]
struct RougeReport {
    n_prompts: usize,
    mean_rouge_l_f1: Option<f64>,
    per_prompt: Vec<RougeEntry>,
}

#[derive(Serialize)]
struct MappingEntry {
    prompt_id: u64,
    position: usize,
    #[serde(flatten)]
    stats: MappingStats,
}

#[derive(Serialize)]
struct MappingReport {
    trials: usize,
    n_tokens: usize,
    mean_distinct_outputs: Option<f64>,
    mean_retention_ratio: Option<f64>,
    tokens: Vec<MappingEntry>,
}

#[derive(Serialize)]
struct CdfSummary {
    prompt_id: u64,
    position: usize,
    token: TokenId,
    epsilon: f64,
    n_buckets: usize,
    tail_threshold: f64,
    standard_tail_mass: f64,
    bucketized_tail_mass: f64,
    bounds: Vec<cape_core::metrics::TailBound>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| sum / n as f64)
}

/// The mechanism an artifact line was produced with, bound pinned.
fn replay_mechanism<'a>(p: &PerturbedPrompt, ws: &'a Workspace, run: Runner) -> Result<Mechanism<'a>, CliError> {
    let mut config = p.config.config.clone();
    config.bound = BoundSetting::Fixed(p.config.clip_bound);
    Ok(Mechanism::new(config, ws.context()?, run.exec)?)
}

fn cdf_csv(points: &[CdfPoint]) -> String {
    let mut out = String::from("probability,cumulative\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.probability, p.cumulative));
    }
    out
}

pub fn evaluate(args: EvaluateArgs, run: Runner) -> Result<(), CliError> {
    let clock = RunClock::start();
    let mut s = Settings::resolve(&args.common, None)?;
    let prompts = load_prompts(&args.artifact)?;
    create_dir(&args.output)?;
    let mut outputs = Vec::new();
    let mut provider = None;

    let (name, summary) = match args.metric {
        MetricArg::Rouge => {
            let per_prompt: Vec<RougeEntry> = prompts
                .iter()
                .map(|p| RougeEntry {
                    prompt_id: p.prompt_id,
                    rouge_l_f1: rouge_l_f1(&p.original_ids, &p.perturbed_ids),
                })
                .collect();
            let report = RougeReport {
                n_prompts: per_prompt.len(),
                mean_rouge_l_f1: mean(per_prompt.iter().map(|e| e.rouge_l_f1)),
                per_prompt,
            };
            println!("mean Rouge-L F1 {:?} over {} prompts", report.mean_rouge_l_f1, report.n_prompts);
            let path = args.output.join("rouge.json");
            write_json_atomic(&path, &report)?;
            outputs.push(path);
            ("rouge", serde_json::json!({ "mean_rouge_l_f1": report.mean_rouge_l_f1 }))
        }
        MetricArg::Mapping => {
            if args.trials == 0 {
                return Err(CliError::Config("--trials must be at least 1".into()));
            }
            let ws = Workspace::load(&mut s, true)?;
            provider = ws.provider.as_ref().map(|p| p.descriptor().clone());
            let mut tokens = Vec::new();
            for p in &prompts {
                let mech = replay_mechanism(p, &ws, run)?;
                for r in p.records.iter().filter(|r| !r.skipped) {
                    tokens.push(MappingEntry {
                        prompt_id: p.prompt_id,
                        position: r.position,
                        stats: mapping_stats(&mech, &p.original_ids, r.position, args.trials)?,
                    });
                }
            }
            let report = MappingReport {
                trials: args.trials,
                n_tokens: tokens.len(),
                mean_distinct_outputs: mean(tokens.iter().map(|t| t.stats.distinct_outputs as f64)),
                mean_retention_ratio: mean(tokens.iter().map(|t| t.stats.retention_ratio)),
                tokens,
            };
            let mut csv = String::from("prompt_id,position,token,distinct_outputs,retention_ratio\n");
            for t in &report.tokens {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    t.prompt_id, t.position, t.stats.token_id, t.stats.distinct_outputs, t.stats.retention_ratio
                ));
            }
            println!(
                "mapping over {} tokens x {} trials: mean S_t {:?}, mean N_t {:?}",
                report.n_tokens, report.trials, report.mean_distinct_outputs, report.mean_retention_ratio
            );
            let (json, csv_path) = (args.output.join("mapping.json"), args.output.join("mapping.csv"));
            write_json_atomic(&json, &report)?;
            write_atomic(&csv_path, csv.as_bytes())?;
            outputs.extend([json, csv_path]);
            (
                "mapping",
                serde_json::json!({
                    "mean_distinct_outputs": report.mean_distinct_outputs,
                    "mean_retention_ratio": report.mean_retention_ratio,
                }),
            )
        }
        MetricArg::Cdf => {
            let ws = Workspace::load(&mut s, true)?;
            provider = ws.provider.as_ref().map(|p| p.descriptor().clone());
            let p = match args.prompt_id {
                Some(id) => prompts.iter().find(|p| p.prompt_id == id),
                None => prompts.first(),
            }
            .ok_or_else(|| CliError::Config("no matching prompt in the artifact".into()))?;
            let position = match args.position {
                Some(pos) if pos < p.original_ids.len() => pos,
                Some(pos) => {
                    return Err(CliError::Config(format!(
                        "position {pos} out of range for a {}-token prompt",
                        p.original_ids.len()
                    )));
                }
                None => p
                    .records
                    .iter()
                    .find(|r| !r.skipped)
                    .map(|r| r.position)
                    .ok_or_else(|| CliError::Config("prompt has no perturbed position".into()))?,
            };
            let mech = replay_mechanism(p, &ws, run)?;
            let u = mech.utility_at(&p.original_ids, position)?;
            let cfg = mech.config();
            let diag = cdf_diagnostic(&u, cfg.epsilon, cfg.n_buckets, &args.top_k)?;
            let summary = CdfSummary {
                prompt_id: p.prompt_id,
                position,
                token: p.original_ids[position],
                epsilon: diag.epsilon,
                n_buckets: diag.n_buckets,
                tail_threshold: diag.tail_threshold,
                standard_tail_mass: diag.standard_tail_mass,
                bucketized_tail_mass: diag.bucketized_tail_mass,
                bounds: diag.bounds.clone(),
            };
            let files = [
                (args.output.join("standard.csv"), cdf_csv(&diag.standard)),
                (args.output.join("bucketized.csv"), cdf_csv(&diag.bucketized)),
            ];
            for (path, body) in &files {
                write_atomic(path, body.as_bytes())?;
            }
            let json = args.output.join("cdf.json");
            write_json_atomic(&json, &summary)?;
            println!(
                "tail mass below {}: standard {:.4}, bucketized {:.4}",
                summary.tail_threshold, summary.standard_tail_mass, summary.bucketized_tail_mass
            );
            outputs.extend(files.into_iter().map(|(p, _)| p));
            outputs.push(json);
            ("cdf", to_value(&summary))
        }
    };
    let mut m = manifest("evaluate", s, run, &clock);
    m.provider = provider;
    m.inputs.push(args.artifact.clone());
    m.outputs = outputs;
    m.summary = serde_json::json!({ "metric": name, "result": summary });
    m.write(&args.output.join(name))?;
    Ok(())
}

pub const MAX_DP_VOCAB: usize = 200;

#[derive(Serialize)]
struct DpCheckEntry {
    fixture: &'static str,
    vocab_size: usize,
    passes: bool,
    #[serde(flatten)]
    report: cape_core::sampler::dp_check::DpCheckReport,
}

pub fn dp_check(args: DpCheckArgs, run: Runner) -> Result<(), CliError> {
    let clock = RunClock::start();
    let v = args.vocab_size;
    if !(2..=MAX_DP_VOCAB).contains(&v) {
        return Err(CliError::Config(format!(
            "--vocab-size must be between 2 and {MAX_DP_VOCAB} for exhaustive enumeration, got {v}"
        )));
    }
    if let Some(e) = args.epsilon.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(CliError::Config(format!("epsilon must be positive and finite, got {e}")));
    }
    if args.buckets.contains(&0) {
        return Err(CliError::Config("--buckets must be at least 1".into()));
    }
    let scope = match args.scope {
        ScopeArg::Global => SensitivityScope::Global,
        ScopeArg::PerOrigin => SensitivityScope::PerOrigin,
    };
    let mut mechanisms: Vec<SelectionMechanism> =
        args.buckets.iter().map(|&n| SelectionMechanism::Bucketized { n_buckets: n }).collect();
    if args.standard {
        mechanisms.push(SelectionMechanism::Standard);
    }

    let mut entries = Vec::new();
    for &fixture in &args.fixtures {
        let (name, family) = match fixture {
            FixtureArg::Random => ("random", UtilityFamily::random(v, v, args.seed)),
            FixtureArg::Identical => ("identical", UtilityFamily::identical(v, v, args.seed)),
            FixtureArg::SkewedWithin => ("skewed-within", UtilityFamily::skewed_within(v, v, args.seed)),
            FixtureArg::SkewedAcross => {
                if v < 4 {
                    return Err(CliError::Config("skewed-across needs --vocab-size of at least 4".into()));
                }
                ("skewed-across", UtilityFamily::skewed_across(v, v / 4 - 1 + usize::from(v < 8)))
            }
        };
        for &eps in &args.epsilon {
            for &mechanism in &mechanisms {
                let report = dp_ratio_check(&family, eps, mechanism, scope, run.exec)?;
                let passes = report.passes();
                let label = match mechanism {
                    SelectionMechanism::Bucketized { n_buckets } => format!("bucketized N_b={n_buckets}"),
                    SelectionMechanism::Standard => "standard".into(),
                };
                println!(
                    "{} {name} |V|={v} eps={eps} {label}: max ratio {:.6}, bound {:.6} (eps' {:.4}), pairwise violations {}{}",
                    if passes { "PASS" } else { "FAIL" },
                    report.max_ratio,
                    report.bound,
                    report.max_epsilon_prime,
                    report.pairwise_violations,
                    if report.per_origin_undercount {
                        ", per-origin eps' undercounts"
                    } else {
                        ""
                    },
                );
                entries.push(DpCheckEntry { fixture: name, vocab_size: v, passes, report });
            }
        }
    }

    let failed = entries.iter().filter(|e| !e.passes).count();
    if let Some(out) = &args.output {
        write_json_atomic(out, &entries)?;
        let mut m = manifest("dp-check", Settings::default(), run, &clock);
        m.seed = Some(args.seed);
        m.outputs.push(out.clone());
        m.summary = serde_json::json!({ "checks": entries.len(), "failed": failed });
        m.write(out)?;
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} of {} checks violated the bound", entries.len())));
    }
    println!("all {} checks passed", entries.len());
    Ok(())
}

pub fn serve_check(args: ServeCheckArgs, _run: Runner) -> Result<(), CliError> {
    let s = Settings::resolve(&args.common, None)?;
    let vocab = load_vocab(&s)?;
    let provider = match &s.provider {
        Some(spec) => open_provider(spec, vocab.clone())?,
        None => require_provider(&s, vocab.clone())?,
    };
    let desc = provider.descriptor();
    println!(
        "ok: {} serves {} logits over {} tokens (vocabulary {})",
        desc.model_name, desc.mode, desc.vocab_size, desc.vocabulary_hash
    );
    if let Some(text) = &args.text {
        let ids = provider.tokenize(text).map_err(CliError::Provider)?;
        if ids.is_empty() {
            return Err(CliError::Config("--text tokenized to nothing".into()));
        }
        let window = cape_core::providers::ContextWindow::new(&ids, 0, desc.mode)?;
        let logits = provider.context_logits(&window).map_err(CliError::Provider)?;
        let top = logits.argmax().and_then(|t| vocab.token(t)).unwrap_or("?");
        println!("probe: {} tokens, {} logits at position 0, top candidate {top:?}", ids.len(), logits.len());
    }
    Ok(())
}
