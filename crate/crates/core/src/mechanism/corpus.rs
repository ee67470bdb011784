//! Corpus runs: read prompts, perturb each, write JSON lines plus a summary.
//!
//! Input lines are either raw text (tokenized by the provider) or JSON
//! objects `{"prompt_id"?, "token_ids"? , "text"?}`. Blank lines are ignored.
//! A prompt's id is its explicit `prompt_id` or else its index among the
//! nonblank lines; it keys the prompt's random streams.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Mechanism, PerturbedPrompt};
use crate::error::{CapeError, Result};
use crate::fsutil::{write_atomic, write_json_atomic};
use crate::par::Execution;
use crate::providers::LogitProvider;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptInput {
    Text(String),
    Ids(Vec<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPrompt {
    pub prompt_id: u64,
    pub input: PromptInput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonPrompt {
    prompt_id: Option<u64>,
    token_ids: Option<Vec<TokenId>>,
    text: Option<String>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusPrompt>> {
    let file = std::fs::File::open(path).map_err(|e| CapeError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CapeError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let index = out.len() as u64;
        let prompt = if trimmed.starts_with('{') {
            let j: JsonPrompt = serde_json::from_str(trimmed)
                .map_err(|e| CapeError::format(path, format!("line {}: {e}", lineno + 1)))?;
            let input = match (j.token_ids, j.text) {
                (Some(ids), None) => PromptInput::Ids(ids),
                (None, Some(text)) => PromptInput::Text(text),
                _ => {
                    return Err(CapeError::format(
                        path,
                        format!("line {}: give exactly one of token_ids or text", lineno + 1),
                    ))
                }
            };
            CorpusPrompt { prompt_id: j.prompt_id.unwrap_or(index), input }
        } else {
            CorpusPrompt { prompt_id: index, input: PromptInput::Text(trimmed.to_string()) }
        };
        out.push(prompt);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub prompt_id: u64,
    pub token_ids: std::result::Result<Vec<TokenId>, String>,
}

/// Resolves every prompt to token ids. Failures are kept per prompt so the
/// caller can decide whether to abort.
pub fn tokenize_corpus(
    prompts: &[CorpusPrompt],
    provider: &dyn LogitProvider,
    vocab: &Vocabulary,
    exec: Execution,
) -> Vec<TokenizedPrompt> {
    exec.map_slice(prompts, |p| {
        let ids = match &p.input {
            PromptInput::Ids(ids) => ids.iter().try_for_each(|&id| vocab.check(id)).map(|_| ids.clone()),
            PromptInput::Text(text) => provider.tokenize(text),
        };
        TokenizedPrompt { prompt_id: p.prompt_id, token_ids: ids.map_err(|e| e.to_string()) }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusOptions {
    /// Write an error line and continue instead of aborting.
    pub skip_errors: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusLine {
    Perturbed(PerturbedPrompt),
    Failed { prompt_id: u64, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub n_prompts: usize,
    pub n_failed: usize,
    pub n_positions: usize,
    pub n_perturbed: usize,
    /// Positions kept verbatim as non-sensitive.
    pub n_retained: usize,
    pub mean_effective_epsilon: Option<f64>,
    pub max_effective_epsilon: Option<f64>,
    pub total_seconds: f64,
    pub mean_seconds_per_prompt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRun {
    pub lines: Vec<CorpusLine>,
    pub summary: CorpusSummary,
}

/// `<output>.summary.json`.
pub fn summary_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

impl CorpusRun {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for line in &self.lines {
            serde_json::to_writer(&mut out, line)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes the JSON lines to `output` and the summary beside it.
    pub fn write(&self, output: &Path) -> Result<()> {
        write_atomic(output, &self.to_jsonl()?)?;
        write_json_atomic(&summary_path(output), &self.summary)
    }

    pub fn perturbed(&self) -> impl Iterator<Item = &PerturbedPrompt> {
        self.lines.iter().filter_map(|l| match l {
            CorpusLine::Perturbed(p) => Some(p),
            CorpusLine::Failed { .. } => None,
        })
    }
}

/// Perturbs every prompt. Prompts run in parallel; lines keep input order.
pub fn perturb_corpus(mech: &Mechanism<'_>, prompts: &[TokenizedPrompt], options: CorpusOptions) -> Result<CorpusRun> {
    let start = Instant::now();
    let results: Vec<Result<PerturbedPrompt>> = mech.execution().map_slice(prompts, |p| {
        let wrap = |e| CapeError::AtPrompt { prompt_id: p.prompt_id, source: Box::new(e) };
        match &p.token_ids {
            Ok(ids) => mech.perturb_prompt(p.prompt_id, ids).map_err(wrap),
            Err(msg) => Err(wrap(CapeError::Provider(format!("tokenization failed: {msg}")))),
        }
    });
    let total_seconds = start.elapsed().as_secs_f64();

    let mut lines = Vec::with_capacity(results.len());
    for (p, r) in prompts.iter().zip(results) {
        match r {
            Ok(pp) => lines.push(CorpusLine::Perturbed(pp)),
            Err(e) if options.skip_errors => {
                log::warn!("{e}");
                lines.push(CorpusLine::Failed { prompt_id: p.prompt_id, error: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }

    let mut summary = CorpusSummary {
        n_prompts: prompts.len(),
        n_failed: lines.iter().filter(|l| matches!(l, CorpusLine::Failed { .. })).count(),
        n_positions: 0,
        n_perturbed: 0,
        n_retained: 0,
        mean_effective_epsilon: None,
        max_effective_epsilon: None,
        total_seconds,
        mean_seconds_per_prompt: if prompts.is_empty() { 0.0 } else { total_seconds / prompts.len() as f64 },
    };
    let mut eps_sum = 0.0;
    for line in &lines {
        if let CorpusLine::Perturbed(p) = line {
            for r in &p.records {
                summary.n_positions += 1;
                match r.effective_epsilon {
                    Some(e) => {
                        summary.n_perturbed += 1;
                        eps_sum += e;
                        summary.max_effective_epsilon =
                            Some(summary.max_effective_epsilon.map_or(e, |m: f64| m.max(e)));
                    }
                    None => summary.n_retained += 1,
                }
            }
        }
    }
    if summary.n_perturbed > 0 {
        summary.mean_effective_epsilon = Some(eps_sum / summary.n_perturbed as f64);
    }
    Ok(CorpusRun { lines, summary })
}

/// Reads a corpus artifact back.
pub fn read_artifact(path: &Path) -> Result<Vec<CorpusLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| CapeError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CapeError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
