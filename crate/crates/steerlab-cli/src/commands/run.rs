use anyhow::{bail, Context, Result};
use serde_json::json;

use steerlab::corpus::{self, Condition, SplitSide, TaskSpec};
use steerlab::judge::{aggregate, Judge};
use steerlab::model::{GenerationParams, InterventionSpec, Model};
use steerlab::parallel::bounded_map;
use steerlab::selection::alpha_sweep;

use super::{
    build_judge, generation_params, load_bank_for, load_model, resolve_workers, select_ids,
    select_texts,
};
use crate::cli::{RunArgs, RunMode, SplitChoice};
use crate::reports::{
    config_hash, now_unix, write_json, Provenance, RunRecordRow, RunReport, REPORT_SCHEMA_VERSION,
};

pub fn run(args: &RunArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (bank, bank_id) = load_bank_for(&model, &args.bank)?;
    let records = corpus::load_prompts(&args.prompts)
        .with_context(|| format!("loading prompts {}", args.prompts.display()))?;
    let judge = build_judge(
        &args.judge,
        &bank.metadata.task,
        &bank.metadata.target_label,
        &bank.metadata.opposite_label,
    )?;
    let params = generation_params(&args.generation);
    let workers = resolve_workers(args.workers, &args.judge);
    let task = TaskSpec {
        name: bank.metadata.task.clone(),
        target_label: bank.metadata.target_label.clone(),
        opposite_label: bank.metadata.opposite_label.clone(),
    };

    // The alpha sweep selects a hyperparameter, so it always runs on the
    // validation split; evaluation modes default to test.
    let split = match (args.mode, args.split) {
        (RunMode::AlphaSweep, Some(SplitChoice::Test)) => {
            bail!("alpha-sweep selects a hyperparameter; it refuses the test split")
        }
        (RunMode::AlphaSweep, _) => SplitSide::Validation,
        (_, Some(SplitChoice::Validation)) => SplitSide::Validation,
        (_, Some(SplitChoice::Test)) | (_, None) => SplitSide::Test,
    };

    let condition = match args.mode {
        RunMode::Baseline | RunMode::Neutral | RunMode::AlphaSweep => Condition::Neutral,
        RunMode::Conflict => Condition::Opposite,
    };
    let texts = select_texts(&records, &task.name, condition, Some(split));
    let ids = select_ids(&records, &task.name, condition, Some(split));
    if texts.is_empty() {
        bail!(
            "no {condition} prompts in the {split} split for task {:?}",
            task.name
        );
    }

    let resolve_layer = || -> Result<usize> {
        if let Some(layer) = args.layer {
            return Ok(layer);
        }
        if let Some(sweep_path) = &args.sweep {
            let raw = std::fs::read_to_string(sweep_path)
                .with_context(|| format!("reading {}", sweep_path.display()))?;
            let report: crate::reports::LayerSweepReport =
                serde_json::from_str(&raw).context("parsing layer sweep report")?;
            return Ok(report.result.best_layer);
        }
        bail!("this mode needs --layer or --sweep")
    };

    let mode_name = match args.mode {
        RunMode::Baseline => "baseline",
        RunMode::Neutral => "neutral",
        RunMode::Conflict => "conflict",
        RunMode::AlphaSweep => "alpha_sweep",
    };

    let (intervention, rows, alpha_summary) = match args.mode {
        RunMode::Baseline => {
            let rows = generate_rows(&model, &texts, &ids, &params, None, judge.as_ref(), workers)?;
            (None, rows, None)
        }
        RunMode::Neutral | RunMode::Conflict => {
            let layer = resolve_layer()?;
            let Some(alpha) = args.alpha else {
                bail!("--alpha is required for {mode_name} mode");
            };
            let Some(vector) = bank.vector(layer) else {
                bail!("bank holds no vector for layer {layer}");
            };
            let intervention = InterventionSpec::new(layer, alpha, vector.to_vec());
            let rows = generate_rows(
                &model,
                &texts,
                &ids,
                &params,
                Some(&intervention),
                judge.as_ref(),
                workers,
            )?;
            (Some(intervention), rows, None)
        }
        RunMode::AlphaSweep => {
            let layer = resolve_layer()?;
            let Some(grid) = args.grid.clone() else {
                bail!("--grid is required for alpha-sweep mode");
            };
            let Some(vector) = bank.vector(layer) else {
                bail!("bank holds no vector for layer {layer}");
            };
            let outcome = alpha_sweep(
                &model,
                vector,
                layer,
                &texts,
                &grid,
                &params,
                judge.as_ref(),
                args.degeneracy_cap,
                workers,
            )?;
            let mut rows = Vec::new();
            for ((alpha, generations), verdicts) in
                grid.iter().zip(&outcome.generations).zip(&outcome.verdicts)
            {
                for ((id, record), verdict) in ids.iter().zip(generations).zip(verdicts) {
                    rows.push(RunRecordRow {
                        prompt_id: id.clone(),
                        prompt_text: model.detokenize(&record.prompt_ids),
                        output_text: record.output_text.clone(),
                        output_ids: record.output_ids.clone(),
                        verdict: verdict.clone(),
                        alpha: Some(*alpha),
                    });
                }
            }
            (None, rows, Some(outcome.result))
        }
    };

    let distribution = aggregate(&rows.iter().map(|r| r.verdict.clone()).collect::<Vec<_>>());
    let effective = json!({
        "command": "run",
        "mode": mode_name,
        "model": args.model.display().to_string(),
        "bank": args.bank.display().to_string(),
        "prompts": args.prompts.display().to_string(),
        "condition": condition.to_string(),
        "split": split.to_string(),
        "intervention": intervention,
        "grid": args.grid,
        "degeneracy_cap": args.degeneracy_cap,
        "params": params,
        "n_prompts": texts.len(),
        "workers": workers,
    });
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: if args.mode == RunMode::AlphaSweep {
            "alpha_sweep".into()
        } else {
            "run".into()
        },
        mode: mode_name.into(),
        task,
        condition: condition.to_string(),
        split: split.to_string(),
        intervention,
        config: effective.clone(),
        provenance: Provenance {
            config_hash: config_hash(&effective),
            seed: args.generation.seed,
            bank_id: Some(bank_id.clone()),
            timestamp_unix: now_unix(),
        },
        distribution: distribution.clone(),
        alpha_summary,
        records: rows,
    };
    let path = args.out.join("runs").join(format!("{mode_name}.json"));
    write_json(&path, &report)?;

    println!(
        "{mode_name}: {} prompts ({})  target {:.3} / opposite {:.3} / neither {:.3}  degenerate {:.3}",
        distribution.n,
        split,
        distribution.target_frac,
        distribution.opposite_frac,
        distribution.neither_frac,
        distribution.degenerate_frac,
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate_rows(
    model: &Model,
    texts: &[String],
    ids: &[String],
    params: &GenerationParams,
    intervention: Option<&InterventionSpec>,
    judge: &dyn Judge,
    workers: usize,
) -> Result<Vec<RunRecordRow>> {
    let outputs: Result<Vec<(steerlab::model::GenerationRecord, steerlab::judge::Verdict)>> =
        bounded_map(texts, workers, |i, text| {
            let prompt_ids = model.tokenize(text);
            if prompt_ids.is_empty() {
                bail!("prompt {} tokenized to zero tokens", ids[i]);
            }
            let record = model.generate(&prompt_ids, params, intervention)?;
            let verdict = judge.judge(&record)?;
            Ok((record, verdict))
        })
        .into_iter()
        .collect();
    Ok(outputs?
        .into_iter()
        .zip(ids)
        .map(|((record, verdict), id)| RunRecordRow {
            prompt_id: id.clone(),
            prompt_text: model.detokenize(&record.prompt_ids),
            output_text: record.output_text.clone(),
            output_ids: record.output_ids,
            verdict,
            alpha: None,
        })
        .collect())
}
