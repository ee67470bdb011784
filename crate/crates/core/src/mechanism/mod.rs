//! The end-to-end perturbation pipeline.
//!
//! For every sensitive position the mechanism asks the provider for logits
//! in the original (unperturbed) context, builds the hybrid utility against
//! the original token's distance row, bucketizes it and samples a
//! replacement. Each position draws from its own stream keyed by
//! `(seed, prompt_id, position)`, so positions are independent and can run
//! in any order.

mod corpus;

use serde::{Deserialize, Serialize};

use crate::error::{CapeError, Result};
use crate::par::Execution;
use crate::providers::{ContextMode, ContextWindow, LogitProvider};
use crate::rng::derive_stream;
use crate::sampler::{bucket_probabilities, bucketize, sample, sample_standard, standard_em_probabilities, BucketSet};
use crate::utility::{calibrate_bound, hybrid_utility, ClipBound, UtilityParams, UtilityVector};
use crate::vocab::{DistanceCache, NonSensitiveSet, TokenId, Vocabulary};

pub use corpus::{
    perturb_corpus, read_artifact, read_corpus, summary_path, tokenize_corpus, CorpusLine, CorpusOptions, CorpusPrompt,
    CorpusRun, CorpusSummary, PromptInput, TokenizedPrompt,
};

/// RNG domain for replacement draws.
pub const PERTURB_STREAM: &str = "perturb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Bucketized,
    /// Plain exponential mechanism over all candidates, sensitivity `B^lambda_L`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSetting {
    Fixed(ClipBound),
    /// Largest positive logit over the first `n` sensitive contexts.
    Calibrate(usize),
}

impl Default for BoundSetting {
    fn default() -> Self {
        BoundSetting::Calibrate(16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonSensitivePolicy {
    #[default]
    Skip,
    PerturbAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub epsilon: f64,
    #[serde(flatten)]
    pub params: UtilityParams,
    pub n_buckets: usize,
    #[serde(default)]
    pub selection: Selection,
    pub bound: BoundSetting,
    #[serde(default)]
    pub nonsensitive_policy: NonSensitivePolicy,
    pub seed: u64,
    #[serde(default)]
    pub mode: ContextMode,
}

impl MechanismConfig {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            params: UtilityParams::default(),
            n_buckets: 50,
            selection: Selection::Bucketized,
            bound: BoundSetting::default(),
            nonsensitive_policy: NonSensitivePolicy::Skip,
            seed,
            mode: ContextMode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CapeError::InvalidParameter(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.n_buckets == 0 {
            return Err(CapeError::InvalidParameter("n_buckets must be at least 1".into()));
        }
        if let BoundSetting::Calibrate(0) = self.bound {
            return Err(CapeError::InvalidParameter("calibration needs at least one sample".into()));
        }
        self.params.validate()
    }
}

/// Configuration as applied, with the clip bound resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    #[serde(flatten)]
    pub config: MechanismConfig,
    pub clip_bound: ClipBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    #[serde(rename = "pos")]
    pub position: usize,
    #[serde(rename = "orig")]
    pub original_id: TokenId,
    #[serde(rename = "repl")]
    pub replacement_id: TokenId,
    pub skipped: bool,
    #[serde(rename = "bucket")]
    pub bucket_index: Option<usize>,
    #[serde(rename = "eps_effective")]
    pub effective_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPrompt {
    pub prompt_id: u64,
    pub original_ids: Vec<TokenId>,
    pub perturbed_ids: Vec<TokenId>,
    pub records: Vec<PerturbationRecord>,
    pub config: ConfigSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    /// `eps + eps'` per position; `None` where the token was kept.
    pub per_position: Vec<Option<f64>>,
    /// Largest entry of `per_position`, `None` if nothing was perturbed.
    pub max_effective_epsilon: Option<f64>,
}

impl PerturbedPrompt {
    pub fn report(&self) -> BudgetReport {
        let per_position: Vec<Option<f64>> = self.records.iter().map(|r| r.effective_epsilon).collect();
        let max_effective_epsilon = per_position.iter().flatten().copied().reduce(f64::max);
        BudgetReport { per_position, max_effective_epsilon }
    }
}

/// Shared read-only inputs of a mechanism.
#[derive(Clone, Copy)]
pub struct MechanismContext<'a> {
    pub vocab: &'a Vocabulary,
    pub nonsensitive: &'a NonSensitiveSet,
    pub distances: &'a DistanceCache,
    pub provider: &'a dyn LogitProvider,
}

pub struct Mechanism<'a> {
    config: MechanismConfig,
    bound: ClipBound,
    ctx: MechanismContext<'a>,
    exec: Execution,
}

impl<'a> Mechanism<'a> {
    /// Builds a mechanism with a fixed clip bound. Use
    /// [`Mechanism::calibrated`] when the config asks for calibration.
    pub fn new(config: MechanismConfig, ctx: MechanismContext<'a>, exec: Execution) -> Result<Self> {
        match config.bound {
            BoundSetting::Fixed(_) => Self::calibrated(config, ctx, exec, &[]),
            BoundSetting::Calibrate(_) => Err(CapeError::InvalidParameter(
                "config requests a calibrated bound; supply calibration prompts".into(),
            )),
        }
    }

    /// Builds a mechanism, resolving a calibrated bound from the first
    /// sensitive positions of `prompts` in order.
    pub fn calibrated(
        config: MechanismConfig,
        ctx: MechanismContext<'a>,
        exec: Execution,
        prompts: &[Vec<TokenId>],
    ) -> Result<Self> {
        config.validate()?;
        let desc = ctx.provider.descriptor();
        desc.check_binding(ctx.vocab)?;
        if desc.mode != config.mode {
            return Err(CapeError::InvalidParameter(format!(
                "config mode {} but provider serves {} logits",
                config.mode, desc.mode
            )));
        }
        ctx.distances.table().check_vocab(ctx.vocab)?;
        let mut mech = Self { config, bound: ClipBound::new(1.0)?, ctx, exec };
        mech.bound = match mech.config.bound {
            BoundSetting::Fixed(b) => b,
            BoundSetting::Calibrate(n) => mech.calibrate(prompts, n)?,
        };
        Ok(mech)
    }

    fn calibrate(&self, prompts: &[Vec<TokenId>], n: usize) -> Result<ClipBound> {
        let windows: Vec<(&[TokenId], usize)> = prompts
            .iter()
            .flat_map(|p| (0..p.len()).filter(|&i| !self.keeps(p[i])).map(move |i| (p.as_slice(), i)))
            .take(n)
            .collect();
        if windows.is_empty() {
            return Err(CapeError::Calibration("no sensitive positions to calibrate on".into()));
        }
        let samples = self.exec.try_map_slice(&windows, |&(ids, pos)| {
            let window = ContextWindow::new(ids, pos, self.config.mode)?;
            self.ctx
                .provider
                .context_logits(&window)
                .map_err(|e| CapeError::AtPosition { position: pos, source: Box::new(e) })
        })?;
        let bound = calibrate_bound(&samples)?;
        log::info!("calibrated clip bound {} from {} contexts", bound.get(), samples.len());
        Ok(bound)
    }

    pub fn config(&self) -> &MechanismConfig {
        &self.config
    }

    pub fn bound(&self) -> ClipBound {
        self.bound
    }

    pub fn context(&self) -> MechanismContext<'a> {
        self.ctx
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot { config: self.config.clone(), clip_bound: self.bound }
    }

    /// True when `token` is copied through unchanged.
    pub fn keeps(&self, token: TokenId) -> bool {
        self.config.nonsensitive_policy == NonSensitivePolicy::Skip && self.ctx.nonsensitive.contains(token)
    }

    /// Hybrid utility of every candidate for the token at `position`.
    pub fn utility_at(&self, token_ids: &[TokenId], position: usize) -> Result<UtilityVector> {
        let at = |e| CapeError::AtPosition { position, source: Box::new(e) };
        let window = ContextWindow::new(token_ids, position, self.config.mode).map_err(at)?;
        let logits = self.ctx.provider.context_logits(&window).map_err(at)?;
        let distances = self.ctx.distances.get(window.target()).map_err(at)?;
        hybrid_utility(&logits, &distances, self.config.params, self.bound).map_err(at)
    }

    pub fn buckets_at(&self, token_ids: &[TokenId], position: usize) -> Result<BucketSet> {
        Ok(bucketize(&self.utility_at(token_ids, position)?.scores, self.config.n_buckets))
    }

    /// Sensitivity of the standard selection rule, `B^lambda_L`.
    pub fn standard_sensitivity(&self) -> f64 {
        self.bound.get().powf(self.config.params.lambda_l)
    }

    /// Exact replacement distribution at `position`.
    pub fn output_distribution(&self, token_ids: &[TokenId], position: usize) -> Result<Vec<f64>> {
        let u = self.utility_at(token_ids, position)?;
        match self.config.selection {
            Selection::Bucketized => {
                bucket_probabilities(&bucketize(&u.scores, self.config.n_buckets), self.config.epsilon)
            }
            Selection::Standard => {
                standard_em_probabilities(&u.scores, self.config.epsilon, self.standard_sensitivity())
            }
        }
    }

    fn perturb_position(&self, prompt_id: u64, token_ids: &[TokenId], position: usize) -> Result<PerturbationRecord> {
        let original = token_ids[position];
        if self.keeps(original) {
            return Ok(PerturbationRecord {
                position,
                original_id: original,
                replacement_id: original,
                skipped: true,
                bucket_index: None,
                effective_epsilon: None,
            });
        }
        let u = self.utility_at(token_ids, position)?;
        let mut rng = derive_stream(self.config.seed, PERTURB_STREAM, &[prompt_id, position as u64]);
        let eps = self.config.epsilon;
        let (replacement, bucket, eff) = match self.config.selection {
            Selection::Bucketized => {
                let set = bucketize(&u.scores, self.config.n_buckets);
                let out = sample(&set, eps, &mut rng)?;
                (out.token_id, Some(out.bucket_index), out.effective_epsilon)
            }
            Selection::Standard => (sample_standard(&u.scores, eps, self.standard_sensitivity(), &mut rng)?, None, eps),
        };
        Ok(PerturbationRecord {
            position,
            original_id: original,
            replacement_id: replacement,
            skipped: false,
            bucket_index: bucket,
            effective_epsilon: Some(eff),
        })
    }

    pub fn perturb_prompt(&self, prompt_id: u64, token_ids: &[TokenId]) -> Result<PerturbedPrompt> {
        for &id in token_ids {
            self.ctx.vocab.check(id)?;
        }
        let records =
            self.exec.try_map_range(token_ids.len(), |pos| self.perturb_position(prompt_id, token_ids, pos))?;
        Ok(PerturbedPrompt {
            prompt_id,
            original_ids: token_ids.to_vec(),
            perturbed_ids: records.iter().map(|r| r.replacement_id).collect(),
            records,
            config: self.snapshot(),
        })
    }
}
