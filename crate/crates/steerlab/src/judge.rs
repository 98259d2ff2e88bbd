//! Verdicts for generations: target / opposite / neither, plus degeneracy.
//!
//! The default judge is deterministic and rule-based. Pattern mode matches
//! literal substrings and regexes against the generated text (the stand-in
//! for an LLM judge); token-class mode compares the fraction of
//! output words falling in each class, which is what the toy vocabulary
//! needs. A remote binary judge speaking a one-request HTTP protocol can be
//! dropped in behind the same [`Judge`] trait.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GenerationRecord;
use crate::parallel::bounded_map;

pub const RULES_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the remote judge endpoint.
pub const JUDGE_URL_ENV: &str = "STEERLAB_JUDGE_URL";
/// Environment variable holding the bearer token for the remote judge.
pub const JUDGE_TOKEN_ENV: &str = "STEERLAB_JUDGE_TOKEN";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error("invalid pattern {pattern:?}: {message}")]
    InvalidPattern { pattern: String, message: String },
    #[error("judge endpoint not configured: set {JUDGE_URL_ENV}")]
    NotConfigured,
    #[error("judge endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("judge request timed out after {0:?}")]
    Timeout(Duration),
    #[error("judge protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Target,
    Opposite,
    Neither,
}

/// Judgment of one generation. `degenerate` is tracked independently of the
/// label so a steered-but-looping output still counts toward its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub degenerate: bool,
    pub repetition_score: f64,
    pub truncated: bool,
}

impl Verdict {
    fn bare(label: Label, truncated: bool) -> Self {
        Self {
            label,
            degenerate: false,
            repetition_score: 0.0,
            truncated,
        }
    }
}

/// A matching rule: literal substring or regular expression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternSpec {
    Literal(String),
    Regex(String),
}

impl PatternSpec {
    fn source(&self) -> &str {
        match self {
            PatternSpec::Literal(s) | PatternSpec::Regex(s) => s,
        }
    }
}

/// Rules file content; one file per task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RulesFile {
    pub schema_version: u32,
    pub task: String,
    #[serde(flatten)]
    pub mode: RuleModeSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RuleModeSpec {
    /// Text matching: any target pattern and no opposite pattern means
    /// target, symmetrically for opposite; both or none mean neither.
    Patterns {
        target_patterns: Vec<PatternSpec>,
        opposite_patterns: Vec<PatternSpec>,
    },
    /// Toy-vocabulary matching on whitespace-separated output tokens: a class
    /// wins when its token fraction reaches `min_token_class_fraction`, with
    /// the same both/none-to-neither logic.
    TokenClass {
        target_tokens: Vec<String>,
        opposite_tokens: Vec<String>,
        min_token_class_fraction: f64,
    },
}

#[derive(Debug)]
enum CompiledMode {
    Patterns {
        target: Vec<CompiledPattern>,
        opposite: Vec<CompiledPattern>,
    },
    TokenClass {
        target: HashSet<String>,
        opposite: HashSet<String>,
        min_fraction: f64,
    },
}

#[derive(Debug)]
struct CompiledPattern {
    source: String,
    kind: CompiledKind,
}

#[derive(Debug)]
enum CompiledKind {
    Literal(String),
    Regex(Regex),
}

impl CompiledPattern {
    fn matches(&self, text: &str) -> bool {
        match &self.kind {
            CompiledKind::Literal(lit) => text.contains(lit),
            CompiledKind::Regex(re) => re.is_match(text),
        }
    }
}

/// Compiled, validated judge rules. Pattern syntax errors surface here, at
/// load time, never per call.
#[derive(Debug)]
pub struct JudgeRules {
    pub task: String,
    mode: CompiledMode,
}

impl JudgeRules {
    pub fn from_spec(spec: RulesFile) -> Result<Self, JudgeError> {
        if spec.schema_version != RULES_SCHEMA_VERSION {
            return Err(JudgeError::InvalidRules(format!(
                "schema_version {} (this build reads {RULES_SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        let mode = match spec.mode {
            RuleModeSpec::Patterns {
                target_patterns,
                opposite_patterns,
            } => {
                if target_patterns.is_empty() || opposite_patterns.is_empty() {
                    return Err(JudgeError::InvalidRules(
                        "pattern lists must be non-empty".into(),
                    ));
                }
                let target_sources: HashSet<&str> =
                    target_patterns.iter().map(PatternSpec::source).collect();
                if let Some(shared) = opposite_patterns
                    .iter()
                    .map(PatternSpec::source)
                    .find(|s| target_sources.contains(s))
                {
                    return Err(JudgeError::InvalidRules(format!(
                        "pattern {shared:?} appears on both sides"
                    )));
                }
                CompiledMode::Patterns {
                    target: compile_patterns(&target_patterns)?,
                    opposite: compile_patterns(&opposite_patterns)?,
                }
            }
            RuleModeSpec::TokenClass {
                target_tokens,
                opposite_tokens,
                min_token_class_fraction,
            } => {
                if !(0.0..=1.0).contains(&min_token_class_fraction) {
                    return Err(JudgeError::InvalidRules(format!(
                        "min_token_class_fraction {min_token_class_fraction} outside [0, 1]"
                    )));
                }
                if target_tokens.is_empty() || opposite_tokens.is_empty() {
                    return Err(JudgeError::InvalidRules(
                        "token class lists must be non-empty".into(),
                    ));
                }
                let target: HashSet<String> = target_tokens.into_iter().collect();
                let opposite: HashSet<String> = opposite_tokens.into_iter().collect();
                if let Some(shared) = target.intersection(&opposite).next() {
                    return Err(JudgeError::InvalidRules(format!(
                        "token {shared:?} appears in both classes"
                    )));
                }
                CompiledMode::TokenClass {
                    target,
                    opposite,
                    min_fraction: min_token_class_fraction,
                }
            }
        };
        Ok(Self {
            task: spec.task,
            mode,
        })
    }

    pub fn load(path: &Path) -> Result<Self, JudgeError> {
        let raw = fs::read_to_string(path).map_err(|source| JudgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: RulesFile =
            serde_json::from_str(&raw).map_err(|e| JudgeError::InvalidRules(e.to_string()))?;
        Self::from_spec(spec)
    }

    /// Pattern sources (or class tokens) that match `text`; used by the
    /// neutral-cue lint.
    pub fn matched_patterns(&self, text: &str) -> Vec<String> {
        match &self.mode {
            CompiledMode::Patterns { target, opposite } => target
                .iter()
                .chain(opposite)
                .filter(|p| p.matches(text))
                .map(|p| p.source.clone())
                .collect(),
            CompiledMode::TokenClass {
                target, opposite, ..
            } => {
                let words: HashSet<&str> = text.split_whitespace().collect();
                let mut hits: Vec<String> = target
                    .iter()
                    .chain(opposite)
                    .filter(|t| words.contains(t.as_str()))
                    .cloned()
                    .collect();
                hits.sort();
                hits
            }
        }
    }
}

fn compile_patterns(specs: &[PatternSpec]) -> Result<Vec<CompiledPattern>, JudgeError> {
    specs
        .iter()
        .map(|spec| {
            let kind = match spec {
                PatternSpec::Literal(s) => CompiledKind::Literal(s.clone()),
                PatternSpec::Regex(s) => {
                    CompiledKind::Regex(Regex::new(s).map_err(|e| JudgeError::InvalidPattern {
                        pattern: s.clone(),
                        message: e.to_string(),
                    })?)
                }
            };
            Ok(CompiledPattern {
                source: spec.source().to_string(),
                kind,
            })
        })
        .collect()
}

/// Classify `text` with deterministic rules. Pure function.
pub fn judge_local(text: &str, rules: &JudgeRules) -> Verdict {
    let truncated = text.trim().is_empty();
    let (target_hit, opposite_hit) = match &rules.mode {
        CompiledMode::Patterns { target, opposite } => (
            target.iter().any(|p| p.matches(text)),
            opposite.iter().any(|p| p.matches(text)),
        ),
        CompiledMode::TokenClass {
            target,
            opposite,
            min_fraction,
        } => {
            let words: Vec<&str> = text.split_whitespace().collect();
            if words.is_empty() {
                (false, false)
            } else {
                let total = words.len() as f64;
                let t = words.iter().filter(|w| target.contains(**w)).count() as f64 / total;
                let o = words.iter().filter(|w| opposite.contains(**w)).count() as f64 / total;
                (t >= *min_fraction, o >= *min_fraction)
            }
        }
    };
    let label = match (target_hit, opposite_hit) {
        (true, false) => Label::Target,
        (false, true) => Label::Opposite,
        _ => Label::Neither,
    };
    Verdict::bare(label, truncated)
}

/// 1 - distinct/total over the sliding `n`-grams of `token_ids`; 0 for
/// sequences shorter than `n`. Higher means more repetitive.
pub fn repetition_score(token_ids: &[u32], n: usize) -> f64 {
    assert!(n >= 1, "n-gram size must be at least 1");
    if token_ids.len() < n {
        return 0.0;
    }
    let total = token_ids.len() - n + 1;
    let distinct: HashSet<&[u32]> = token_ids.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

/// Degeneracy detection parameters: n-gram size and the repetition score
/// above which an output counts as degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyConfig {
    pub ngram: usize,
    pub threshold: f64,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        Self {
            ngram: 4,
            threshold: 0.5,
        }
    }
}

/// Anything that can turn a generation into a [`Verdict`].
pub trait Judge: Sync {
    fn judge(&self, record: &GenerationRecord) -> Result<Verdict, JudgeError>;
}

/// The deterministic local judge: rule label plus repetition metrics.
pub struct RuleJudge {
    pub rules: JudgeRules,
    pub degeneracy: DegeneracyConfig,
}

impl RuleJudge {
    pub fn new(rules: JudgeRules) -> Self {
        Self {
            rules,
            degeneracy: DegeneracyConfig::default(),
        }
    }
}

/// Fill in repetition, degeneracy, and truncation for a full record.
fn complete_verdict(
    mut verdict: Verdict,
    record: &GenerationRecord,
    degeneracy: DegeneracyConfig,
) -> Verdict {
    verdict.repetition_score = repetition_score(&record.output_ids, degeneracy.ngram);
    verdict.degenerate = verdict.repetition_score > degeneracy.threshold;
    // Truncated: empty output, or the token budget ran out while a stop id
    // was configured (the generation never finished naturally).
    verdict.truncated = record.output_ids.is_empty()
        || (record.params.stop_ids.is_some()
            && record.output_ids.len() == record.params.max_new_tokens);
    verdict
}

impl Judge for RuleJudge {
    fn judge(&self, record: &GenerationRecord) -> Result<Verdict, JudgeError> {
        let base = judge_local(&record.output_text, &self.rules);
        Ok(complete_verdict(base, record, self.degeneracy))
    }
}

/// Request payload of the remote binary-judge protocol.
#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    task: &'a str,
    target: &'a str,
    opposite: &'a str,
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    label: Label,
}

/// Remote binary judge: one HTTP POST per generation, expecting
/// `{"label": "target" | "opposite" | "neither"}` back. Network failures
/// surface as errors, never as a silent `neither`.
#[derive(Debug)]
pub struct RemoteJudge {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub task: String,
    pub target: String,
    pub opposite: String,
    pub degeneracy: DegeneracyConfig,
}

impl RemoteJudge {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
    /// Default bound on concurrent in-flight requests.
    pub const DEFAULT_IN_FLIGHT: usize = 4;

    /// Configure from `STEERLAB_JUDGE_URL` / `STEERLAB_JUDGE_TOKEN`.
    pub fn from_env(task: &str, target: &str, opposite: &str) -> Result<Self, JudgeError> {
        let url = std::env::var(JUDGE_URL_ENV).map_err(|_| JudgeError::NotConfigured)?;
        let token = std::env::var(JUDGE_TOKEN_ENV).ok();
        Ok(Self {
            url,
            token,
            timeout: Self::DEFAULT_TIMEOUT,
            task: task.to_string(),
            target: target.to_string(),
            opposite: opposite.to_string(),
            degeneracy: DegeneracyConfig::default(),
        })
    }

    /// Send one classification request.
    pub fn classify(&self, text: &str) -> Result<Label, JudgeError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(&self.url);
        if let Some(token) = &self.token {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(RemoteRequest {
                task: &self.task,
                target: &self.target,
                opposite: &self.opposite,
                text,
            })
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => JudgeError::Timeout(self.timeout),
                other => JudgeError::Unreachable(other.to_string()),
            })?;
        if response.status() != 200 {
            return Err(JudgeError::Protocol(format!(
                "endpoint answered HTTP {}",
                response.status()
            )));
        }
        let body: RemoteResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| JudgeError::Protocol(format!("bad response payload: {e}")))?;
        Ok(body.label)
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, record: &GenerationRecord) -> Result<Verdict, JudgeError> {
        let label = self.classify(&record.output_text)?;
        let base = Verdict::bare(label, false);
        Ok(complete_verdict(base, record, self.degeneracy))
    }
}

/// Classify one text against a remote endpoint configured via environment
/// variables. Degeneracy fields stay at their defaults since no token ids
/// are available here.
pub fn judge_remote(
    text: &str,
    task: &str,
    target: &str,
    opposite: &str,
) -> Result<Verdict, JudgeError> {
    let judge = RemoteJudge::from_env(task, target, opposite)?;
    let label = judge.classify(text)?;
    Ok(Verdict::bare(label, text.trim().is_empty()))
}

/// Judge a batch with at most `workers` concurrent calls, preserving order.
pub fn judge_all(
    judge: &dyn Judge,
    records: &[GenerationRecord],
    workers: usize,
) -> Result<Vec<Verdict>, JudgeError> {
    bounded_map(records, workers, |_, r| judge.judge(r))
        .into_iter()
        .collect()
}

/// Counts and fractions over a verdict list. Degenerate and truncated are
/// counted independently of the label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictDistribution {
    pub n: usize,
    pub target: usize,
    pub opposite: usize,
    pub neither: usize,
    pub degenerate: usize,
    pub truncated: usize,
    pub target_frac: f64,
    pub opposite_frac: f64,
    pub neither_frac: f64,
    pub degenerate_frac: f64,
}

pub fn aggregate(verdicts: &[Verdict]) -> VerdictDistribution {
    let mut dist = VerdictDistribution {
        n: verdicts.len(),
        ..Default::default()
    };
    for v in verdicts {
        match v.label {
            Label::Target => dist.target += 1,
            Label::Opposite => dist.opposite += 1,
            Label::Neither => dist.neither += 1,
        }
        if v.degenerate {
            dist.degenerate += 1;
        }
        if v.truncated {
            dist.truncated += 1;
        }
    }
    if dist.n > 0 {
        let n = dist.n as f64;
        dist.target_frac = dist.target as f64 / n;
        dist.opposite_frac = dist.opposite as f64 / n;
        dist.neither_frac = dist.neither as f64 / n;
        dist.degenerate_frac = dist.degenerate as f64 / n;
    }
    dist
}
