use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cape_core::fsutil::write_json_atomic;
use cape_core::providers::ProviderDescriptor;
use serde::Serialize;

use crate::exit::CliError;
use crate::settings::Settings;

#[derive(Debug, Serialize)]
pub struct Timing {
    pub started_unix: u64,
    pub wall_seconds: f64,
}

/// Written beside every output so a run can be audited and replayed with
/// `--config <manifest>`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config: Settings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderDescriptor>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub jobs: usize,
    pub timing: Timing,
    /// Command-specific summary.
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

pub struct RunClock {
    started_unix: u64,
    start: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            start: Instant::now(),
        }
    }

    pub fn timing(&self) -> Timing {
        Timing { started_unix: self.started_unix, wall_seconds: self.start.elapsed().as_secs_f64() }
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

impl RunManifest {
    pub fn write(&self, output: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(output);
        write_json_atomic(&path, self)?;
        Ok(path)
    }
}
