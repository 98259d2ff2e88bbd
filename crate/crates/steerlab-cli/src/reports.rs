//! On-disk schemas for sweep results and experiment reports.
//!
//! Every file carries `schema_version`, a hash of the effective config, the
//! seed, the direction-bank id, and a timestamp. Run reports keep the raw
//! generations and verdicts so fractions can always be recomputed and a
//! remote judge can be re-run without regenerating.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use steerlab::corpus::TaskSpec;
use steerlab::judge::{Verdict, VerdictDistribution};
use steerlab::model::InterventionSpec;
use steerlab::rng::fnv1a64;
use steerlab::selection::{AlphaSweepResult, SweepResult};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_id: Option<String>,
    pub timestamp_unix: u64,
}

/// One prompt's generation and judgment inside a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecordRow {
    pub prompt_id: String,
    pub prompt_text: String,
    pub output_text: String,
    pub output_ids: Vec<u32>,
    pub verdict: Verdict,
    /// Grid strength for alpha-sweep rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    /// "run" or "alpha_sweep".
    pub kind: String,
    /// baseline | neutral | conflict | alpha_sweep
    pub mode: String,
    pub task: TaskSpec,
    /// Prompt condition the run consumed.
    pub condition: String,
    /// Which split was evaluated.
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionSpec>,
    pub config: Value,
    pub provenance: Provenance,
    pub distribution: VerdictDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_summary: Option<AlphaSweepResult>,
    pub records: Vec<RunRecordRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub task: TaskSpec,
    pub config: Value,
    pub provenance: Provenance,
    pub result: SweepResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaSweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub task: TaskSpec,
    pub layer: usize,
    pub config: Value,
    pub provenance: Provenance,
    pub result: AlphaSweepResult,
}

/// FNV-1a hash of the canonical (sorted-key) JSON form of a config.
pub fn config_hash(config: &Value) -> String {
    format!("{:016x}", fnv1a64(config.to_string().as_bytes()))
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value).context("serializing report")?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: RunReport =
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        bail!(
            "{}: schema-version mismatch: file has {}, this build reads {}",
            path.display(),
            report.schema_version,
            REPORT_SCHEMA_VERSION
        );
    }
    Ok(report)
}
