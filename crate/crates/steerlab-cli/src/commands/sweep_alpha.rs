use anyhow::{bail, Context, Result};
use serde_json::json;

use steerlab::corpus::{self, TaskSpec};
use steerlab::selection::alpha_sweep;

use super::{
    build_judge, generation_params, load_bank_for, load_model, resolve_workers,
    validation_texts_or_refuse,
};
use crate::cli::SweepAlphaArgs;
use crate::reports::{
    config_hash, now_unix, write_json, AlphaSweepReport, Provenance, REPORT_SCHEMA_VERSION,
};

pub fn run(args: &SweepAlphaArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (bank, bank_id) = load_bank_for(&model, &args.bank)?;
    let Some(vector) = bank.vector(args.layer) else {
        bail!(
            "bank {} holds no vector for layer {}",
            args.bank.display(),
            args.layer
        );
    };
    let records = corpus::load_prompts(&args.prompts)
        .with_context(|| format!("loading prompts {}", args.prompts.display()))?;
    let (texts, _) = validation_texts_or_refuse(&records, &bank.metadata.task)?;

    let judge = build_judge(
        &args.judge,
        &bank.metadata.task,
        &bank.metadata.target_label,
        &bank.metadata.opposite_label,
    )?;
    let params = generation_params(&args.generation);
    let workers = resolve_workers(args.workers, &args.judge);
    let outcome = alpha_sweep(
        &model,
        vector,
        args.layer,
        &texts,
        &args.grid,
        &params,
        judge.as_ref(),
        args.degeneracy_cap,
        workers,
    )?;
    let result = outcome.result;

    let task = TaskSpec {
        name: bank.metadata.task.clone(),
        target_label: bank.metadata.target_label.clone(),
        opposite_label: bank.metadata.opposite_label.clone(),
    };
    let effective = json!({
        "command": "sweep-alpha",
        "model": args.model.display().to_string(),
        "bank": args.bank.display().to_string(),
        "prompts": args.prompts.display().to_string(),
        "layer": args.layer,
        "grid": args.grid,
        "degeneracy_cap": args.degeneracy_cap,
        "params": params,
        "n_prompts": texts.len(),
    });
    let report = AlphaSweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "alpha_sweep".into(),
        task,
        layer: args.layer,
        config: effective.clone(),
        provenance: Provenance {
            config_hash: config_hash(&effective),
            seed: args.generation.seed,
            bank_id: Some(bank_id.clone()),
            timestamp_unix: now_unix(),
        },
        result: result.clone(),
    };
    let path = args.out.join("sweeps").join("alpha_sweep.json");
    write_json(&path, &report)?;

    println!(
        "alpha sweep at layer {} over {} validation prompts",
        args.layer, result.n_prompts
    );
    for (alpha, cell) in result.grid.iter().zip(&result.per_alpha) {
        println!(
            "  alpha {alpha}: target {} / opposite {} / neither {} (degenerate {})",
            cell.target_count, cell.opposite_count, cell.neither_count, cell.degenerate_count
        );
    }
    match result.selected_alpha {
        Some(alpha) => println!("selected alpha = {alpha}"),
        None => println!(
            "no alpha satisfied the degeneracy cap {}",
            args.degeneracy_cap
        ),
    }
    println!("wrote {}", path.display());
    Ok(())
}
