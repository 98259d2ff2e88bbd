use anyhow::{Context, Result};
use serde_json::json;

use steerlab::corpus::{self, TaskSpec};
use steerlab::selection::layer_sweep;

use super::{
    build_judge, generation_params, load_bank_for, load_model, resolve_workers,
    validation_texts_or_refuse,
};
use crate::cli::SweepLayerArgs;
use crate::reports::{
    config_hash, now_unix, write_json, LayerSweepReport, Provenance, REPORT_SCHEMA_VERSION,
};

pub fn run(args: &SweepLayerArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (bank, bank_id) = load_bank_for(&model, &args.bank)?;
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
    let result = layer_sweep(
        &model,
        &bank,
        &texts,
        args.alpha,
        &params,
        judge.as_ref(),
        workers,
    )?;

    let task = TaskSpec {
        name: bank.metadata.task.clone(),
        target_label: bank.metadata.target_label.clone(),
        opposite_label: bank.metadata.opposite_label.clone(),
    };
    let effective = json!({
        "command": "sweep-layer",
        "model": args.model.display().to_string(),
        "bank": args.bank.display().to_string(),
        "prompts": args.prompts.display().to_string(),
        "alpha": args.alpha,
        "params": params,
        "n_prompts": texts.len(),
    });
    let report = LayerSweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "layer_sweep".into(),
        task,
        config: effective.clone(),
        provenance: Provenance {
            config_hash: config_hash(&effective),
            seed: args.generation.seed,
            bank_id: Some(bank_id.clone()),
            timestamp_unix: now_unix(),
        },
        result: result.clone(),
    };
    let path = args.out.join("sweeps").join("layer_sweep.json");
    write_json(&path, &report)?;

    println!(
        "layer sweep over {} validation prompts at alpha = {}",
        result.n_prompts, result.alpha_used
    );
    for (layer, count) in &result.per_layer {
        let marker = if *layer == result.best_layer {
            "  <- l*"
        } else {
            ""
        };
        println!("  M[{layer}] = {count}{marker}");
    }
    println!("wrote {}", path.display());
    Ok(())
}
