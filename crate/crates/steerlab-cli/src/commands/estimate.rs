use std::collections::BTreeSet;

use anyhow::{Context, Result};
use serde_json::json;

use steerlab::corpus::{self, Condition, TaskSpec};
use steerlab::directions::{estimate_directions, save_bank, EstimatorConfig};
use steerlab::tensor::norm;

use super::{load_model, select_texts};
use crate::cli::EstimateArgs;
use crate::reports::config_hash;

pub fn run(args: &EstimateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let records = corpus::load_prompts(&args.prompts)
        .with_context(|| format!("loading prompts {}", args.prompts.display()))?;

    let positives = select_texts(&records, &args.task, Condition::Target, None);
    let negatives = select_texts(&records, &args.task, Condition::Opposite, None);

    let task = TaskSpec {
        name: args.task.clone(),
        target_label: args.target_label.clone(),
        opposite_label: args.opposite_label.clone(),
    };
    let config = EstimatorConfig {
        k_last_tokens: args.k,
        layers: args
            .layers
            .as_ref()
            .map(|l| l.iter().copied().collect::<BTreeSet<_>>()),
        normalize: args.normalize,
        workers: args.workers,
    };
    let bank = estimate_directions(&model, &task, &positives, &negatives, &config)?;

    let bank_dir = args.out.join("bank");
    std::fs::create_dir_all(&bank_dir)
        .with_context(|| format!("creating {}", bank_dir.display()))?;
    let bank_path = bank_dir.join(format!("{}.bank", args.task));
    save_bank(&bank, &bank_path)?;

    let effective = json!({
        "command": "estimate",
        "model": args.model.display().to_string(),
        "prompts": args.prompts.display().to_string(),
        "task": task,
        "k": args.k,
        "layers": args.layers,
        "normalize": args.normalize,
    });
    println!("config_hash: {}", config_hash(&effective));
    println!(
        "estimated {} directions from {} positive / {} negative prompts (K = {})",
        bank.directions.len(),
        bank.metadata.n_positive,
        bank.metadata.n_negative,
        bank.metadata.k_last_tokens,
    );
    for (layer, v) in &bank.directions {
        println!("  layer {layer}: |v| = {:.6}", norm(v));
    }
    println!("wrote {}", bank_path.display());
    Ok(())
}
