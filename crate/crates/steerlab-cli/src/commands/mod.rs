//! Subcommand implementations.

pub mod estimate;
pub mod make_planted;
pub mod report;
pub mod run;
pub mod sweep_alpha;
pub mod sweep_layer;
pub mod validate;

use std::path::Path;

use anyhow::{bail, Context, Result};

use steerlab::corpus::{Condition, PromptRecord, SplitSide};
use steerlab::directions::{load_bank, DirectionBank};
use steerlab::judge::{DegeneracyConfig, Judge, JudgeRules, RemoteJudge, RuleJudge};
use steerlab::model::{DecodeStrategy, GenerationParams, Model};

use crate::cli::{GenerationArgs, JudgeArgs, JudgeMode};

/// Worker bound: explicit flag wins; otherwise 1 locally, the remote
/// judge's default in-flight bound when judging over HTTP.
pub fn resolve_workers(explicit: Option<usize>, judge: &JudgeArgs) -> usize {
    explicit.unwrap_or(match judge.judge {
        JudgeMode::Local => 1,
        JudgeMode::Remote => RemoteJudge::DEFAULT_IN_FLIGHT,
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// Load a bank, check it against the model, and hash the file for
/// provenance.
pub fn load_bank_for(model: &Model, path: &Path) -> Result<(DirectionBank, String)> {
    let bank = load_bank(path).with_context(|| format!("loading bank {}", path.display()))?;
    bank.check_model(model)
        .with_context(|| format!("bank {} does not fit the model", path.display()))?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let id = format!("{:016x}", steerlab::rng::fnv1a64(&bytes));
    Ok((bank, id))
}

pub fn generation_params(args: &GenerationArgs) -> GenerationParams {
    GenerationParams {
        max_new_tokens: args.max_new_tokens,
        strategy: match args.temperature {
            Some(temperature) => DecodeStrategy::Temperature { temperature },
            None => DecodeStrategy::Greedy,
        },
        seed: args.seed,
        stop_ids: (!args.stop_ids.is_empty()).then(|| args.stop_ids.clone()),
    }
}

/// Build the configured judge. The remote judge takes its endpoint from the
/// environment and the task labels from the bank metadata.
pub fn build_judge(
    args: &JudgeArgs,
    task: &str,
    target_label: &str,
    opposite_label: &str,
) -> Result<Box<dyn Judge>> {
    let degeneracy = DegeneracyConfig {
        ngram: args.degeneracy_ngram,
        threshold: args.degeneracy_score_threshold,
    };
    match args.judge {
        JudgeMode::Local => {
            let rules = JudgeRules::load(&args.rules)
                .with_context(|| format!("loading rules {}", args.rules.display()))?;
            Ok(Box::new(RuleJudge { rules, degeneracy }))
        }
        JudgeMode::Remote => {
            let mut judge = RemoteJudge::from_env(task, target_label, opposite_label)?;
            judge.degeneracy = degeneracy;
            Ok(Box::new(judge))
        }
    }
}

/// Texts of the records matching task, condition, and (when given) split.
pub fn select_texts(
    records: &[PromptRecord],
    task: &str,
    condition: Condition,
    split: Option<SplitSide>,
) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.task == task && r.condition == condition)
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| r.text.clone())
        .collect()
}

/// Ids of the same selection, kept aligned with [`select_texts`].
pub fn select_ids(
    records: &[PromptRecord],
    task: &str,
    condition: Condition,
    split: Option<SplitSide>,
) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.task == task && r.condition == condition)
        .filter(|r| split.is_none() || r.split == split)
        .map(|r| r.id.clone())
        .collect()
}

/// Validation-split guard shared by the sweep commands: sweeps select
/// hyperparameters, so they must never consume the test split.
pub fn validation_texts_or_refuse(
    records: &[PromptRecord],
    task: &str,
) -> Result<(Vec<String>, Vec<String>)> {
    let texts = select_texts(
        records,
        task,
        Condition::Neutral,
        Some(SplitSide::Validation),
    );
    if texts.is_empty() {
        let test_only = records
            .iter()
            .any(|r| r.task == task && r.split == Some(SplitSide::Test));
        if test_only {
            bail!(
                "refusing to sweep: the corpus holds no validation-split neutral prompts \
                 for task {task:?}, only test-split ones; sweeps never touch the test split"
            );
        }
        bail!(
            "no validation-split neutral prompts for task {task:?}; \
             run `steerlab validate-corpus` and assign splits first"
        );
    }
    let ids = select_ids(
        records,
        task,
        Condition::Neutral,
        Some(SplitSide::Validation),
    );
    Ok((texts, ids))
}
