use anyhow::{Context, Result};

use steerlab::planted::{write_fixture, PlantedSpec};

use crate::cli::MakePlantedArgs;

pub fn run(args: &MakePlantedArgs) -> Result<()> {
    let spec = PlantedSpec {
        d_model: args.d_model,
        n_layers: args.n_layers,
        null_block: args.null_block,
        attenuation: args.attenuation,
        ..PlantedSpec::default()
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let fixture = write_fixture(
        &args.out,
        &spec,
        args.seed,
        args.n_per_condition,
        args.validation_fraction,
    )?;

    println!("planted fixture in {}", args.out.display());
    println!("  model:   {}", fixture.model_path.display());
    println!("  prompts: {}", fixture.prompts_path.display());
    println!("  rules:   {}", fixture.rules_path.display());
    println!("ground truth:");
    println!("  best layer l* = {}", fixture.truth.best_layer);
    for (layer, threshold) in &fixture.truth.alpha_threshold {
        if threshold.is_finite() {
            println!("  alpha_threshold({layer}) = {threshold}");
        } else {
            println!("  alpha_threshold({layer}) = inf (below the null block)");
        }
    }
    println!();
    println!("next steps:");
    println!(
        "  steerlab estimate --model {m} --prompts {p} --task {t} \\\n      --target-label class-a --opposite-label class-b --normalize --out {o}",
        m = fixture.model_path.display(),
        p = fixture.prompts_path.display(),
        t = fixture.task.name,
        o = args.out.display(),
    );
    println!(
        "  steerlab sweep-layer --model {m} --bank {o}/bank/{t}.bank --prompts {p} \\\n      --rules {r} --alpha 2.0 --out {o}",
        m = fixture.model_path.display(),
        p = fixture.prompts_path.display(),
        r = fixture.rules_path.display(),
        t = fixture.task.name,
        o = args.out.display(),
    );
    Ok(())
}
