//! Effective configuration: flags over config file over built-in defaults.

use std::path::{Path, PathBuf};

use cape_core::mechanism::{BoundSetting, MechanismConfig, NonSensitivePolicy, Selection};
use cape_core::providers::ContextMode;
use cape_core::utility::{ClipBound, UtilityParams};
use serde::{Deserialize, Serialize};

use crate::args::{CommonArgs, MechanismArgs};
use crate::exit::CliError;

pub const PROVIDER_ENV: &str = "CAPE_PROVIDER_URL";

/// Every setting a command may read. Absent fields fall through to the next
/// layer; the resolved copy is echoed into each run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonsensitive: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ContextMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonsensitive_policy: Option<NonSensitivePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
struct ManifestConfig {
    config: Settings,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl Settings {
    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: Settings) -> Settings {
        overlay!(self, top; vocab, embeddings, provider, nonsensitive, distances, mode, epsilon, lambda_l,
            lambda_d, n_buckets, selection, clip_bound, calibration_samples, nonsensitive_policy, seed);
        self
    }

    /// Reads a config file or the `config` object of a run manifest.
    /// Relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed = if value.get("config").is_some() {
            serde_json::from_value::<ManifestConfig>(value).map(|m| m.config)
        } else {
            serde_json::from_value::<Settings>(value)
        };
        let mut s = parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut s.vocab, &mut s.embeddings, &mut s.distances].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut s.provider, &mut s.nonsensitive].into_iter().flatten() {
            if !is_url(p) && p != "none" && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(s)
    }

    /// Environment defaults, then the config file, then flags.
    pub fn resolve(common: &CommonArgs, mech: Option<&MechanismArgs>) -> Result<Settings, CliError> {
        let env =
            Settings { provider: std::env::var(PROVIDER_ENV).ok().filter(|v| !v.is_empty()), ..Default::default() };
        let file = match &common.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let mut flags = Settings {
            vocab: common.vocab.clone(),
            embeddings: common.embeddings.clone(),
            provider: common.provider.clone(),
            nonsensitive: common.nonsensitive.clone(),
            distances: common.distances.clone(),
            mode: common.mode.map(Into::into),
            ..Default::default()
        };
        if let Some(m) = mech {
            flags.epsilon = m.epsilon;
            flags.lambda_l = m.lambda_l;
            flags.lambda_d = m.lambda_d;
            flags.n_buckets = m.buckets;
            flags.selection = m.selection.map(Into::into);
            flags.clip_bound = m.clip_bound;
            flags.calibration_samples = m.calibration_samples;
            flags.nonsensitive_policy = m.nonsensitive_policy.map(Into::into);
            flags.seed = m.seed;
        }
        Ok(env.overlay(file).overlay(flags))
    }

    /// Fills mechanism defaults in place and builds the core config.
    /// A missing seed is drawn at random and written back.
    pub fn mechanism_config(&mut self) -> Result<MechanismConfig, CliError> {
        let epsilon =
            self.epsilon.ok_or_else(|| CliError::Config("--epsilon is required (in flags or config file)".into()))?;
        let defaults = MechanismConfig::new(epsilon, 0);
        let seed = *self.seed.get_or_insert_with(rand::random);
        let lambda_l = *self.lambda_l.get_or_insert(defaults.params.lambda_l);
        let lambda_d = *self.lambda_d.get_or_insert(defaults.params.lambda_d);
        let n_buckets = *self.n_buckets.get_or_insert(defaults.n_buckets);
        let selection = *self.selection.get_or_insert(defaults.selection);
        let policy = *self.nonsensitive_policy.get_or_insert(defaults.nonsensitive_policy);
        let mode = *self.mode.get_or_insert(defaults.mode);
        let bound = match self.clip_bound {
            Some(b) => BoundSetting::Fixed(ClipBound::new(b).map_err(CliError::from_config)?),
            None => BoundSetting::Calibrate(*self.calibration_samples.get_or_insert(match defaults.bound {
                BoundSetting::Calibrate(n) => n,
                BoundSetting::Fixed(_) => unreachable!("default bound is calibrated"),
            })),
        };
        let config = MechanismConfig {
            epsilon,
            params: UtilityParams::new(lambda_l, lambda_d).map_err(CliError::from_config)?,
            n_buckets,
            selection,
            bound,
            nonsensitive_policy: policy,
            seed,
            mode,
        };
        config.validate().map_err(CliError::from_config)?;
        Ok(config)
    }

    pub fn mode(&self) -> ContextMode {
        self.mode.unwrap_or_default()
    }
}

pub fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}
