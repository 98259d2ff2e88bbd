//! Prompt dataset ingestion, validation, de-duplication, and splitting.
//!
//! Datasets are JSON-lines files, one record per line with fields
//! `id`, `task`, `condition` (`target` | `opposite` | `neutral`), `text`,
//! and an optional `split` (`validation` | `test`). Splitting is stratified
//! per `(task, condition)` so both splits keep the condition balance exact,
//! and is a pure function of the seed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::JudgeRules;
use crate::rng::{fnv1a64, SplitMix64};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("validation fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Target,
    Opposite,
    Neutral,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Target => write!(f, "target"),
            Condition::Opposite => write!(f, "opposite"),
            Condition::Neutral => write!(f, "neutral"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Validation,
    Test,
}

impl fmt::Display for SplitSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSide::Validation => write!(f, "validation"),
            SplitSide::Test => write!(f, "test"),
        }
    }
}

/// One prompt with its task, condition, and (once assigned) split side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub task: String,
    pub condition: Condition,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSide>,
}

/// A discrimination task: steer toward `target_label`, away from
/// `opposite_label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub target_label: String,
    pub opposite_label: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_label.is_empty() || self.opposite_label.is_empty() {
            return Err("task labels must be non-empty".into());
        }
        if self.target_label == self.opposite_label {
            return Err(format!(
                "target and opposite labels are both {:?}",
                self.target_label
            ));
        }
        Ok(())
    }
}

/// Trim and collapse internal whitespace, case preserved. This is the
/// equality key for de-duplication.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse a JSON-lines prompt file. Blank lines are ignored; any malformed
/// line fails with its line number; duplicate ids and empty texts are
/// rejected.
pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_prompts(&raw)
}

/// Parse prompt records from JSONL text. See [`load_prompts`].
pub fn parse_prompts(raw: &str) -> Result<Vec<PromptRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: PromptRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if normalize_text(&record.text).is_empty() {
            return Err(CorpusError::EmptyText {
                line: line_no,
                id: record.id,
            });
        }
        if !seen_ids.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSONL.
pub fn save_prompts(records: &[PromptRecord], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Remove records whose normalized text was already seen, keeping the first
/// occurrence and the original order. Condition and text are never rewritten.
pub fn dedup(records: Vec<PromptRecord>) -> Vec<PromptRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(normalize_text(&r.text)))
        .collect()
}

/// Split assignment plus any per-stratum warnings.
#[derive(Debug)]
pub struct SplitOutcome {
    pub records: Vec<PromptRecord>,
    pub warnings: Vec<String>,
}

/// Assign validation/test splits, stratified per `(task, condition)`.
///
/// Within each stratum the records are shuffled by a SplitMix64 stream seeded
/// with `seed XOR fnv1a64("<task>\x1f<condition>")`; the first
/// `floor(fraction * n)` land in validation, the rest in test. Strata with
/// fewer than two records go entirely to test with a warning. Re-running with
/// the same seed reproduces the assignment exactly; input order is preserved.
pub fn split(
    records: Vec<PromptRecord>,
    seed: u64,
    validation_fraction: f64,
) -> Result<SplitOutcome, CorpusError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(validation_fraction));
    }

    // Strata in first-appearance order, record indices in input order.
    let mut strata: Vec<((String, Condition), Vec<usize>)> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let key = (record.task.clone(), record.condition);
        match strata.iter_mut().find(|(k, _)| *k == key) {
            Some((_, indices)) => indices.push(i),
            None => strata.push((key, vec![i])),
        }
    }

    let mut records = records;
    let mut warnings = Vec::new();
    for ((task, condition), mut indices) in strata {
        if indices.len() < 2 {
            warnings.push(format!(
                "stratum ({task}, {condition}) has {} record(s); assigning all to test",
                indices.len()
            ));
            for i in indices {
                records[i].split = Some(SplitSide::Test);
            }
            continue;
        }
        let stratum_key = format!("{task}\u{1f}{condition}");
        let mut rng = SplitMix64::new(seed ^ fnv1a64(stratum_key.as_bytes()));
        rng.shuffle(&mut indices);
        let n_validation = (validation_fraction * indices.len() as f64).floor() as usize;
        for (rank, i) in indices.into_iter().enumerate() {
            records[i].split = Some(if rank < n_validation {
                SplitSide::Validation
            } else {
                SplitSide::Test
            });
        }
    }

    Ok(SplitOutcome { records, warnings })
}

/// A neutral prompt carrying an explicit cue for its task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LintFinding {
    pub id: String,
    pub task: String,
    pub matched: Vec<String>,
}

/// Flag neutral records whose text matches any judge pattern for the task.
/// Findings are reported, never auto-edited.
pub fn lint_neutral_cues(records: &[PromptRecord], rules: &JudgeRules) -> Vec<LintFinding> {
    records
        .iter()
        .filter(|r| r.condition == Condition::Neutral)
        .filter_map(|r| {
            let matched = rules.matched_patterns(&r.text);
            (!matched.is_empty()).then(|| LintFinding {
                id: r.id.clone(),
                task: r.task.clone(),
                matched,
            })
        })
        .collect()
}
