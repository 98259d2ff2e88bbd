use std::collections::BTreeMap;

use anyhow::{Context, Result};

use steerlab::corpus::{self, lint_neutral_cues, normalize_text};
use steerlab::judge::JudgeRules;

use crate::cli::ValidateCorpusArgs;

pub fn run(args: &ValidateCorpusArgs) -> Result<()> {
    let records = corpus::load_prompts(&args.prompts)
        .with_context(|| format!("loading prompts {}", args.prompts.display()))?;

    let mut by_stratum: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for r in &records {
        let split = r.split.map_or("unsplit".to_string(), |s| s.to_string());
        *by_stratum
            .entry((r.task.clone(), r.condition.to_string(), split))
            .or_default() += 1;
    }
    println!("{} records", records.len());
    for ((task, condition, split), count) in &by_stratum {
        println!("  {task} / {condition} / {split}: {count}");
    }

    let deduped = corpus::dedup(records.clone());
    if deduped.len() < records.len() {
        println!(
            "dedup: {} records share normalized text with an earlier record",
            records.len() - deduped.len()
        );
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(normalize_text(&r.text)) {
                println!("  duplicate: {}", r.id);
            }
        }
    } else {
        println!("dedup: no duplicate texts");
    }

    if let Some(rules_path) = &args.rules {
        let rules = JudgeRules::load(rules_path)?;
        let findings = lint_neutral_cues(&records, &rules);
        if findings.is_empty() {
            println!("lint: no neutral prompts match judge patterns");
        } else {
            for finding in &findings {
                println!(
                    "lint: neutral record {} ({}) matches {:?}",
                    finding.id, finding.task, finding.matched
                );
            }
            println!(
                "lint: {} neutral prompt(s) carry explicit cues",
                findings.len()
            );
        }
    }
    Ok(())
}
